//! Residual convolutional encoder: LR image to a same-resolution latent map.

use crate::nn::{self, conv3x3_specs, ParamSpec, ParamStore};
use crate::tensor::{Border, Graph, Result, Scalar, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub c_enc: usize,
    pub n_blocks: usize,
    pub c_out: usize,
    pub unfold: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            c_enc: 32,
            n_blocks: 4,
            c_out: 64,
            unfold: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.c_enc == 0 || self.n_blocks == 0 || self.c_out == 0 {
            return Err(format!(
                "encoder widths and block count must be at least 1 (c_enc={}, n_blocks={}, c_out={})",
                self.c_enc, self.n_blocks, self.c_out
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = conv3x3_specs("encoder.head", 3, self.c_enc);
        for i in 0..self.n_blocks {
            v.extend(conv3x3_specs(&format!("encoder.block{i}.conv1"), self.c_enc, self.c_enc));
            v.extend(conv3x3_specs(&format!("encoder.block{i}.conv2"), self.c_enc, self.c_enc));
        }
        let tail_in = if self.unfold { 9 * self.c_enc } else { self.c_enc };
        v.extend(conv3x3_specs("encoder.tail", tail_in, self.c_out));
        v
    }
}

/// Maps `image: [h, w, 3]` (values in `[-1, 1]`) to a latent map `[h, w, c_out]`.
pub fn encode<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &EncoderConfig, image: Var) -> Result<Var> {
    let mut h = nn::conv3x3(g, store, "encoder.head", image)?;
    for i in 0..cfg.n_blocks {
        let y = nn::conv3x3(g, store, &format!("encoder.block{i}.conv1"), h)?;
        let y = g.relu(y);
        let y = nn::conv3x3(g, store, &format!("encoder.block{i}.conv2"), y)?;
        h = g.add(h, y)?;
    }
    if cfg.unfold {
        let s = g.shape(h).to_vec();
        let u = g.unfold3x3(h, Border::Clamp)?;
        h = g.reshape(u, &[s[0], s[1], 9 * s[2]])?;
    }
    nn::conv3x3(g, store, "encoder.tail", h)
}
