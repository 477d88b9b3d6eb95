mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use common::{small_dataset, small_training, write_config, xdec, SIZE};
use tempfile::TempDir;
use xdec::io::{read_f32, read_pgm};

/// One small dataset shared by every test in this file.
fn dataset() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = dir.path().join("dataset.json");
        write_config(&cfg, &small_dataset());
        let out = dir.path().join("data");
        let code = xdec(&[
            "dataset",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        dir
    })
    .path()
}

fn train(dir: &Path, name: &str, steps: u64, resume: Option<&Path>) -> PathBuf {
    let cfg = dir.join(format!("{name}.json"));
    write_config(&cfg, &small_training(20));
    let out = dir.join(name);
    let data = dataset().join("data/train");
    let steps = steps.to_string();
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--steps",
        &steps,
        "--out",
        out.to_str().unwrap(),
    ];
    let resume = resume.map(|p| p.to_str().unwrap().to_owned());
    if let Some(r) = &resume {
        args.extend(["--resume", r]);
    }
    assert_eq!(xdec(&args), 0);
    out.join("final.xdec")
}

#[test]
fn phantom_to_modulated_image() {
    let tmp = TempDir::new().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_owned();

    assert_eq!(xdec(&["phantom", "--varied", "--seed", "3", "--out", &p("vol")]), 0);
    assert_eq!(
        xdec(&[
            "drr",
            "--volume",
            &p("vol"),
            "--size",
            "32",
            "--fov-mm",
            "200",
            "--rotation",
            "-4",
            "--out",
            &p("drr")
        ]),
        0
    );
    let total = read_f32(&tmp.path().join("drr/total.f32")).unwrap();
    let parts: Vec<Vec<f32>> = ["bone", "lung", "other"]
        .iter()
        .map(|n| read_f32(&tmp.path().join(format!("drr/{n}.f32"))).unwrap())
        .collect();
    for (k, t) in total.iter().enumerate() {
        assert!((parts[0][k] + parts[1][k] + parts[2][k] - t).abs() <= 1e-4 * t.abs().max(1.0));
    }
    let shown = read_pgm(&tmp.path().join("drr/total.pgm")).unwrap();
    assert_eq!(shown.dims(), (SIZE, SIZE));

    let ck = train(tmp.path(), "run", 20, None);
    let ck = ck.to_str().unwrap();
    let eval_dir = dataset().join("data/eval");
    assert_eq!(
        xdec(&[
            "eval",
            "--checkpoint",
            ck,
            "--eval-set",
            eval_dir.to_str().unwrap(),
            "--out",
            &p("report.json")
        ]),
        0
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert!(report.is_object());

    let image = p("drr/total.pgm");
    assert_eq!(
        xdec(&[
            "modulate",
            "--checkpoint",
            ck,
            "--image",
            &image,
            "--preset",
            "lung-enhance",
            "--out",
            &p("m1")
        ]),
        0
    );
    assert_eq!(
        xdec(&[
            "modulate",
            "--checkpoint",
            ck,
            "--image",
            &image,
            "--alphas",
            "1,2,1",
            "--out",
            &p("m2")
        ]),
        0
    );
    for f in ["x_m.pgm", "x_m.f32", "z_bone.pgm", "z_lung.pgm", "z_other.pgm"] {
        let (a, b) = (tmp.path().join("m1").join(f), tmp.path().join("m2").join(f));
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{f}");
    }
    let bytes = fs::read(tmp.path().join("m1/x_m.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n"));
    let x_m = read_pgm(&tmp.path().join("m1/x_m.pgm")).unwrap();
    assert_eq!(x_m.dims(), (SIZE, SIZE));
    assert!(x_m.data.iter().all(|v| (0.0..=1.0).contains(v)));

    assert_eq!(
        xdec(&["drr", "--volume", &p("vol"), "--size", "48", "--out", &p("big")]),
        0
    );
    let wrong = p("big/total.pgm");
    assert_eq!(
        xdec(&[
            "modulate",
            "--checkpoint",
            ck,
            "--image",
            &wrong,
            "--preset",
            "identity",
            "--out",
            &p("m3")
        ]),
        2
    );
    assert_eq!(
        xdec(&["modulate", "--checkpoint", ck, "--image", &image, "--out", &p("m4")]),
        2
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = TempDir::new().unwrap();
    let straight = train(tmp.path(), "straight", 20, None);
    let half = train(tmp.path(), "half", 10, None);
    let resumed = train(tmp.path(), "half", 20, Some(&half));
    assert_eq!(fs::read(straight).unwrap(), fs::read(resumed).unwrap());
    let log = |name: &str| fs::read_to_string(tmp.path().join(name).join("losses.tsv")).unwrap();
    assert_eq!(log("straight"), log("half"));
}
