use rand::Rng;

use crate::contrastive::ProjectionParams;
use crate::milhead::HeadParams;
use crate::numkit::{ParamTensor, Parameters, Scalar};
use crate::refine::RefineBranch;

/// Dimensions that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub proj_dim: usize,
    pub refine_branches: usize,
}

/// All learnable values: one MIL head per modality, the shared projection
/// with its temperature, and the refinement branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub rgb_head: HeadParams<T>,
    pub depth_head: HeadParams<T>,
    pub projection: ProjectionParams<T>,
    pub refine: Vec<RefineBranch<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialization. Every tensor is drawn in a fixed order
    /// regardless of which components a run will use, so runs that differ
    /// only in toggles start from identical parameters.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rho: T, head_std: f64, rng: &mut R) -> Self {
        let (d, c) = (dims.feature_dim, dims.num_classes);
        let rgb_head = HeadParams::random("rgb_head", d, c, head_std, rng);
        let depth_head = HeadParams::random("depth_head", d, c, head_std, rng);
        let projection = ProjectionParams::random(d, dims.proj_dim, rho, rng);
        let refine = (0..dims.refine_branches)
            .map(|k| RefineBranch::random(k, d, c, head_std, rng))
            .collect();
        ModelParams {
            rgb_head,
            depth_head,
            projection,
            refine,
        }
    }

    /// All-zero parameters with ρ set to `rho`; a target for checkpoint loads.
    pub fn zeros(dims: ModelDims, rho: T) -> Self {
        let (d, c) = (dims.feature_dim, dims.num_classes);
        ModelParams {
            rgb_head: HeadParams::zeros("rgb_head", d, c),
            depth_head: HeadParams::zeros("depth_head", d, c),
            projection: ProjectionParams::new(d, dims.proj_dim, rho),
            refine: (0..dims.refine_branches)
                .map(|k| RefineBranch::zeros(k, d, c))
                .collect(),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.rgb_head.feature_dim(),
            num_classes: self.rgb_head.num_classes(),
            proj_dim: self.projection.w_proj.shape().1,
            refine_branches: self.refine.len(),
        }
    }
}

impl<T> Parameters<T> for ModelParams<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut v = self.rgb_head.params();
        v.extend(self.depth_head.params());
        v.extend(self.projection.params());
        for b in &self.refine {
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut v = self.rgb_head.params_mut();
        v.extend(self.depth_head.params_mut());
        v.extend(self.projection.params_mut());
        for b in &mut self.refine {
            v.extend(b.params_mut());
        }
        v
    }
}
