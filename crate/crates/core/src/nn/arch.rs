//! Network presets for the outer (image) and nested (latent) VAEs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Layer, NnError, ParamStore, Sequential};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(1, 28, 28)
    }
}

/// Outer VAE layout.
///
/// `Conv`: two stride-2 4×4 convolutions, a dense hidden layer and Gaussian
/// heads; the decoder mirrors it with dense layers followed by two rounds
/// of nearest-neighbour upsampling and 3×3 convolution.
/// `Mlp`: one dense hidden layer on each side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OuterArch {
    Conv { channels: [usize; 2], hidden: usize },
    Mlp { hidden: usize },
}

impl Default for OuterArch {
    fn default() -> Self {
        OuterArch::Conv {
            channels: [32, 64],
            hidden: 256,
        }
    }
}

/// Builds the shared encoder trunk; returns it with its output width.
pub fn outer_encoder_body<R: Rng + ?Sized>(
    arch: &OuterArch,
    input: ImageShape,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<(Sequential, usize), NnError> {
    match *arch {
        OuterArch::Mlp { hidden } => Ok((
            Sequential::new(vec![
                Layer::Flatten,
                Layer::dense(
                    store,
                    "enc.fc",
                    input.numel(),
                    hidden,
                    Activation::Relu,
                    rng,
                ),
            ]),
            hidden,
        )),
        OuterArch::Conv {
            channels: [c1, c2],
            hidden,
        } => {
            let (h4, w4) = quarter(input)?;
            Ok((
                Sequential::new(vec![
                    Layer::conv(
                        store,
                        "enc.conv1",
                        input.channels,
                        c1,
                        4,
                        2,
                        1,
                        Activation::Relu,
                        rng,
                    ),
                    Layer::conv(store, "enc.conv2", c1, c2, 4, 2, 1, Activation::Relu, rng),
                    Layer::Flatten,
                    Layer::dense(store, "enc.fc", c2 * h4 * w4, hidden, Activation::Relu, rng),
                ]),
                hidden,
            ))
        }
    }
}

pub fn outer_decoder<R: Rng + ?Sized>(
    arch: &OuterArch,
    output: ImageShape,
    latent: usize,
    output_activation: Activation,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<Sequential, NnError> {
    match *arch {
        OuterArch::Mlp { hidden } => Ok(Sequential::new(vec![
            Layer::dense(store, "dec.fc1", latent, hidden, Activation::Relu, rng),
            Layer::dense(
                store,
                "dec.fc2",
                hidden,
                output.numel(),
                output_activation,
                rng,
            ),
            Layer::Reshape {
                shape: vec![output.channels, output.height, output.width],
            },
        ])),
        OuterArch::Conv {
            channels: [c1, c2],
            hidden,
        } => {
            let (h4, w4) = quarter(output)?;
            Ok(Sequential::new(vec![
                Layer::dense(store, "dec.fc1", latent, hidden, Activation::Relu, rng),
                Layer::dense(
                    store,
                    "dec.fc2",
                    hidden,
                    c2 * h4 * w4,
                    Activation::Relu,
                    rng,
                ),
                Layer::Reshape {
                    shape: vec![c2, h4, w4],
                },
                Layer::Upsample { factor: 2 },
                Layer::conv(store, "dec.conv1", c2, c1, 3, 1, 1, Activation::Relu, rng),
                Layer::Upsample { factor: 2 },
                Layer::conv(
                    store,
                    "dec.conv2",
                    c1,
                    output.channels,
                    3,
                    1,
                    1,
                    output_activation,
                    rng,
                ),
            ]))
        }
    }
}

fn quarter(s: ImageShape) -> Result<(usize, usize), NnError> {
    if s.height % 4 != 0 || s.width % 4 != 0 || s.height == 0 || s.width == 0 {
        return Err(NnError::Config(format!(
            "conv architecture needs height and width divisible by 4, got {}x{}",
            s.height, s.width
        )));
    }
    Ok((s.height / 4, s.width / 4))
}

/// Two ReLU dense layers of `width` units.
pub fn nested_encoder_body<R: Rng + ?Sized>(
    d_in: usize,
    width: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Sequential {
    Sequential::new(vec![
        Layer::dense(store, "nest.enc.fc1", d_in, width, Activation::Relu, rng),
        Layer::dense(store, "nest.enc.fc2", width, width, Activation::Relu, rng),
    ])
}

/// Two ReLU dense layers of `width` units and a linear read-out to `d_out`.
pub fn nested_decoder<R: Rng + ?Sized>(
    d_s: usize,
    width: usize,
    d_out: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Sequential {
    Sequential::new(vec![
        Layer::dense(store, "nest.dec.fc1", d_s, width, Activation::Relu, rng),
        Layer::dense(store, "nest.dec.fc2", width, width, Activation::Relu, rng),
        Layer::dense(
            store,
            "nest.dec.out",
            width,
            d_out,
            Activation::Identity,
            rng,
        ),
    ])
}
