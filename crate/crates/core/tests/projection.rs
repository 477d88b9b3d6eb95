use proptest::prelude::*;
use xdec_core::drr::{
    project, project_components, to_display, AttenuationVolume, BoneSplit, DatasetNorm, Detector, Pose,
};
use xdec_core::phantom::{Grid, LabelVolume, Tissue, Volume3D};

fn grid() -> impl Strategy<Value = Grid> {
    (
        [3usize..9, 3usize..9, 3usize..9],
        [0.5f32..3.0, 0.5f32..3.0, 0.5f32..3.0],
    )
        .prop_map(|(extents, spacing_mm)| Grid { extents, spacing_mm })
}

fn volume() -> impl Strategy<Value = AttenuationVolume> {
    grid().prop_flat_map(|g| {
        prop::collection::vec(0.0f32..0.05, g.len()).prop_map(move |mu| AttenuationVolume { grid: g, mu })
    })
}

fn pose() -> impl Strategy<Value = Pose> {
    (-20.0f32..20.0, 0.8f32..1.2).prop_map(|(rotation_deg, scale)| Pose { rotation_deg, scale })
}

fn detector() -> impl Strategy<Value = Detector> {
    (4usize..12, 4usize..12, prop::option::of([4.0f32..20.0, 4.0f32..20.0])).prop_map(|(h, w, fov)| Detector {
        height: h,
        width: w,
        fov_mm: fov,
    })
}

fn mirror_x(v: &AttenuationVolume) -> AttenuationVolume {
    let [nz, ny, nx] = v.grid.extents;
    let mut mu = vec![0.0; v.mu.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                mu[v.grid.index(z, y, nx - 1 - x)] = v.mu[v.grid.index(z, y, x)];
            }
        }
    }
    AttenuationVolume { grid: v.grid, mu }
}

fn max_abs(a: &[f32]) -> f32 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn projection_is_linear(vol in volume(), pose in pose(), det in detector(), alpha in 0.1f32..10.0) {
        let base = project(&vol, pose, &det).unwrap();
        let scaled = AttenuationVolume { grid: vol.grid, mu: vol.mu.iter().map(|m| m * alpha).collect() };
        let img = project(&scaled, pose, &det).unwrap();
        let scale = max_abs(&img.data).max(1e-12);
        for (a, b) in img.data.iter().zip(&base.data) {
            prop_assert!((a - alpha * b).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn mirrored_volume_gives_mirrored_projection(vol in volume(), pose in pose(), det in detector()) {
        let flipped = project(&mirror_x(&vol), pose, &det).unwrap();
        let opposite = Pose { rotation_deg: -pose.rotation_deg, ..pose };
        let want = project(&vol, opposite, &det).unwrap().mirrored();
        let scale = max_abs(&want.data).max(1e-12);
        for (a, b) in flipped.data.iter().zip(&want.data) {
            prop_assert!((a - b).abs() <= 1e-3 * scale);
        }
    }

    #[test]
    fn components_add_up_for_any_labelling(
        g in grid(),
        seed in any::<u64>(),
        pose in pose(),
        det in detector(),
        fill_hu in -100.0f32..200.0,
    ) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let values: Vec<f32> = (0..g.len()).map(|_| (next() % 4000) as f32 - 1000.0).collect();
        let labels: Vec<Tissue> = (0..g.len()).map(|_| Tissue::from_code((next() % 4) as u8).unwrap()).collect();
        let vol = Volume3D::new(g, values).unwrap();
        let labels = LabelVolume { grid: g, labels };
        for split in [BoneSplit::Labeled, BoneSplit::Excess { fill_hu }] {
            let d = project_components(&vol, &labels, pose, &det, split).unwrap();
            prop_assert!(d.additivity_error() < 1e-4, "error {}", d.additivity_error());
            let norm = DatasetNorm::new(d.total.max().max(1e-3) * 1.5).unwrap();
            let parts = [&d.bone, &d.lung, &d.other].map(|i| to_display(i, norm));
            let total = to_display(&d.total, norm);
            for (k, t) in total.data.iter().enumerate() {
                let s = parts[0].data[k] + parts[1].data[k] + parts[2].data[k];
                prop_assert!((s - t).abs() <= 1e-6);
            }
        }
    }
}
