//! Trained model container: network weights, the scaling that maps physical
//! units into the net's [0,1] space, per-split metrics, and the training
//! history. Serialized as JSON; this file is the contract between the train
//! and solve commands.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{MetricsReport, ScalingSpec};
use crate::error::{Error, Result};

use super::train::{TrainConfig, TrainingHistory};
use super::ShallowNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: MetricsReport,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: ShallowNet,
    pub input_scaling: ScalingSpec,
    /// Single-column scaling for the target.
    pub output_scaling: ScalingSpec,
    pub metrics: SplitMetrics,
    pub config: TrainConfig,
    pub history: TrainingHistory,
}

impl TrainedModel {
    pub fn new(
        net: ShallowNet,
        input_scaling: ScalingSpec,
        output_scaling: ScalingSpec,
        metrics: SplitMetrics,
        config: TrainConfig,
        history: TrainingHistory,
    ) -> Result<Self> {
        if input_scaling.dim() != net.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: net.input_dim(),
                got: input_scaling.dim(),
            });
        }
        if output_scaling.dim() != 1 {
            return Err(Error::Schema("output scaling must have exactly one column".into()));
        }
        Ok(Self { net, input_scaling, output_scaling, metrics, config, history })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.input_scaling.names()
    }

    pub fn target_name(&self) -> &str {
        &self.output_scaling.columns[0].name
    }

    fn scale_input(&self, x: &DVector<f64>, inputs_scaled: bool) -> DVector<f64> {
        if inputs_scaled {
            x.clone()
        } else {
            DVector::from_fn(x.len(), |i, _| self.input_scaling.columns[i].apply(x[i]))
        }
    }

    /// dv_scaled/dv_physical per input column (0 for constant columns).
    fn input_slopes(&self, inputs_scaled: bool) -> DVector<f64> {
        if inputs_scaled {
            DVector::from_element(self.input_dim(), 1.0)
        } else {
            DVector::from_fn(self.input_dim(), |i, _| {
                let c = &self.input_scaling.columns[i];
                if c.is_constant() { 0.0 } else { 1.0 / (c.max - c.min) }
            })
        }
    }

    fn output_span(&self) -> f64 {
        let c = &self.output_scaling.columns[0];
        c.max - c.min
    }

    /// Model prediction in physical target units. `inputs_scaled` says whether
    /// `x` is already in the net's [0,1] space or in physical units.
    pub fn eval(&self, x: &DVector<f64>, inputs_scaled: bool) -> Result<f64> {
        let u = self.scale_input(x, inputs_scaled);
        let raw = self.net.forward(&u)?;
        Ok(self.output_scaling.columns[0].invert(raw))
    }

    /// Gradient of the physical-unit prediction with respect to `x`.
    pub fn gradient(&self, x: &DVector<f64>, inputs_scaled: bool) -> Result<DVector<f64>> {
        let u = self.scale_input(x, inputs_scaled);
        let g = self.net.input_gradient(&u)?;
        let slopes = self.input_slopes(inputs_scaled);
        let span = self.output_span();
        Ok(DVector::from_fn(g.len(), |i, _| span * g[i] * slopes[i]))
    }

    pub fn hessian(&self, x: &DVector<f64>, inputs_scaled: bool) -> Result<DMatrix<f64>> {
        let u = self.scale_input(x, inputs_scaled);
        let h = self.net.input_hessian(&u)?;
        let slopes = self.input_slopes(inputs_scaled);
        let span = self.output_span();
        Ok(DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| span * h[(i, j)] * slopes[i] * slopes[j]))
    }

    /// Hessian of the k-th physical-gradient component (third derivatives).
    pub fn gradient_component_hessian(
        &self,
        x: &DVector<f64>,
        k: usize,
        inputs_scaled: bool,
    ) -> Result<DMatrix<f64>> {
        let u = self.scale_input(x, inputs_scaled);
        let t = self.net.gradient_component_hessian(&u, k)?;
        let slopes = self.input_slopes(inputs_scaled);
        let span = self.output_span();
        Ok(DMatrix::from_fn(t.nrows(), t.ncols(), |l, m| {
            span * t[(l, m)] * slopes[k] * slopes[l] * slopes[m]
        }))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            input_dim: self.net.input_dim(),
            hidden: self.net.hidden_count(),
            activation: "silu".to_string(),
            w1_row_major: self.net.w1.row_iter().flat_map(|r| r.iter().cloned().collect::<Vec<_>>()).collect(),
            b1: self.net.b1.iter().cloned().collect(),
            w2: self.net.w2.iter().cloned().collect(),
            b2: self.net.b2,
            input_scaling: self.input_scaling.clone(),
            output_scaling: self.output_scaling.clone(),
            metrics: self.metrics,
            config: self.config.clone(),
            history: self.history.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(json)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("unsupported model format `{}`", file.format)));
        }
        if file.activation != "silu" {
            return Err(Error::Schema(format!("unsupported activation `{}`", file.activation)));
        }
        if file.w1_row_major.len() != file.hidden * file.input_dim {
            return Err(Error::Schema("w1 length does not match dimensions".into()));
        }
        let net = ShallowNet::new(
            DMatrix::from_row_slice(file.hidden, file.input_dim, &file.w1_row_major),
            DVector::from_vec(file.b1),
            DVector::from_vec(file.w2),
            file.b2,
        )?;
        TrainedModel::new(
            net,
            file.input_scaling,
            file.output_scaling,
            file.metrics,
            file.config,
            file.history,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const MODEL_FORMAT: &str = "shallow-net/1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    input_dim: usize,
    hidden: usize,
    activation: String,
    w1_row_major: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    input_scaling: ScalingSpec,
    output_scaling: ScalingSpec,
    metrics: SplitMetrics,
    config: TrainConfig,
    history: TrainingHistory,
}
