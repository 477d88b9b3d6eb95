use anyhow::{ensure, Result};
use xdec_core::decgan::{ComponentWeights, DecGan};
use xdec_core::drr::Image2D;
use xdec_core::train::{images_to_tensor, tensor_to_images};

/// Modulated reconstruction and the bone, lung and residual maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub x_m: Image2D,
    pub maps: [Image2D; 3],
}

pub const MAP_NAMES: [&str; 3] = ["z_bone", "z_lung", "z_other"];

pub fn decompose(nets: &DecGan<f32>, size: usize, img: &Image2D, w: ComponentWeights) -> Result<Decomposition> {
    ensure!(
        img.dims() == (size, size),
        "expected {size}×{size} image, got {}×{}",
        img.height,
        img.width
    );
    w.validate()?;
    let x = images_to_tensor([&[img][..]])?;
    let m = nets.modulate(&x, w)?;
    let mut x_m = tensor_to_images(&m.x_m, 0)?;
    let maps = [0, 1, 2].map(|c| tensor_to_images(&m.z, c).map(|mut v| v.remove(0)));
    let [b, l, o] = maps;
    Ok(Decomposition {
        x_m: x_m.remove(0),
        maps: [b?, l?, o?],
    })
}
