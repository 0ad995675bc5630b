use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    DitTiny,
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "dit-tiny" => Ok(Arch::DitTiny),
            _ => Err(Error::Config(format!("unknown arch {s:?} (mlp|dit-tiny)"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::DitTiny => "dit-tiny",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Feature count of one sample for the MLP.
    pub data_dim: usize,
    /// Side of the square input image for dit-tiny.
    pub image_size: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    /// 0 means unconditional; otherwise a null class `num_classes` is added
    /// for guidance.
    pub num_classes: usize,
    pub time_embed_dim: usize,
    /// Mix timestep/class embedding tables per expert (otherwise shared).
    pub mix_embeddings: bool,
}

impl ModelConfig {
    pub fn mlp() -> Self {
        ModelConfig {
            arch: Arch::Mlp,
            data_dim: 2,
            image_size: 8,
            channels: 1,
            width: 128,
            depth: 4,
            patch_size: 2,
            num_heads: 4,
            num_classes: 0,
            time_embed_dim: 64,
            mix_embeddings: true,
        }
    }

    pub fn dit_tiny() -> Self {
        ModelConfig {
            arch: Arch::DitTiny,
            width: 64,
            depth: 3,
            ..Self::mlp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.depth == 0 || self.time_embed_dim < 2 {
            return bad("width, depth must be >= 1 and time_embed_dim >= 2".into());
        }
        match self.arch {
            Arch::Mlp if self.data_dim == 0 => bad("data_dim must be >= 1".into()),
            Arch::DitTiny => {
                if self.num_heads == 0 || !self.width.is_multiple_of(self.num_heads) {
                    return bad(format!("width {} not divisible by num_heads {}", self.width, self.num_heads));
                }
                if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
                    return bad(format!(
                        "patch_size {} does not divide image_size {}",
                        self.patch_size, self.image_size
                    ));
                }
                if self.channels == 0 {
                    return bad("channels must be >= 1".into());
                }
                Ok(())
            }
            Arch::Mlp => Ok(()),
        }
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.arch {
            Arch::Mlp => vec![self.data_dim],
            Arch::DitTiny => vec![self.channels, self.image_size, self.image_size],
        }
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    pub fn null_class(&self) -> Option<usize> {
        (self.num_classes > 0).then_some(self.num_classes)
    }
}
