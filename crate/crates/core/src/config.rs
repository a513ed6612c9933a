//! TOML scenario documents.
//!
//! ```toml
//! controller = "nftsm"          # nftsm | nftsm-no-taub | pd
//! failure_budget = 5
//!
//! [robot]
//! preset = "panda_on_base"     # or planar_two_link; or a full explicit model
//!
//! [pomptc]
//! horizon = 5
//! control_horizon = 5
//! c_pose = 50000.0             # scalar, diagonal list, or full matrix
//! b_vel = 1.0
//! b_acc = 20.0
//!
//! [ftcnd]                      # every key optional
//! [nftsm]                      # every key optional
//! [pd]                         # kp/kd (scalar or list) or bandwidth
//!
//! [scenario]
//! initial_arm = [0.0, -0.78, 0.0, -2.35, 0.0, 1.57, 0.78]
//! reference = { kind = "circle", radius = 0.1 }
//! ```
//!
//! Validation errors name the offending key path.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ftcnd::FtcndParams;
use crate::model::{builtin_panda_on_base, builtin_planar_two_link, JointLimits, RobotModel};
use crate::nftsm::NftsmParams;
use crate::pomptc::PomptcWeights;
use crate::sim::{Controller, PdGains, ScenarioScript, SimParams, PD_BANDWIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    PandaOnBase,
    PlanarTwoLink,
}

impl Preset {
    pub fn build(self) -> RobotModel {
        match self {
            Preset::PandaOnBase => builtin_panda_on_base(),
            Preset::PlanarTwoLink => builtin_planar_two_link(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RobotChoice {
    Preset {
        preset: Preset,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limits: Option<JointLimits>,
    },
    Explicit(RobotModel),
}

/// A weight given as `w I`, `diag(w)` or a full matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightInput {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl WeightInput {
    fn resolve(&self, k: usize, path: &str) -> Result<DMatrix<f64>> {
        match self {
            WeightInput::Scalar(w) => Ok(DMatrix::identity(k, k) * *w),
            WeightInput::Diagonal(d) => {
                if d.len() != k {
                    return Err(Error::config(path, format!("expected {k} diagonal entries, found {}", d.len())));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
            }
            WeightInput::Full(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(Error::config(path, format!("expected a {k}x{k} matrix")));
                }
                Ok(DMatrix::from_fn(k, k, |r, c| rows[r][c]))
            }
        }
    }

    /// Diagonal form when `m` is diagonal, full otherwise.
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let diagonal = (0..m.nrows()).all(|r| (0..m.ncols()).all(|c| r == c || m[(r, c)] == 0.0));
        if diagonal {
            WeightInput::Diagonal(m.diagonal().iter().copied().collect())
        } else {
            WeightInput::Full(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainInput {
    Scalar(f64),
    PerJoint(Vec<f64>),
}

impl GainInput {
    fn resolve(&self, n: usize, path: &str) -> Result<DVector<f64>> {
        match self {
            GainInput::Scalar(g) => Ok(DVector::from_element(n, *g)),
            GainInput::PerJoint(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            GainInput::PerJoint(v) => Err(Error::config(path, format!("expected {n} gains, found {}", v.len()))),
        }
    }
}

fn default_horizon() -> usize {
    5
}

fn default_c_pose() -> WeightInput {
    WeightInput::Scalar(50000.0)
}

fn default_b_vel() -> WeightInput {
    WeightInput::Scalar(1.0)
}

fn default_b_acc() -> WeightInput {
    WeightInput::Scalar(20.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PomptcSection {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_horizon")]
    pub control_horizon: usize,
    #[serde(default = "default_c_pose")]
    pub c_pose: WeightInput,
    #[serde(default = "default_b_vel")]
    pub b_vel: WeightInput,
    #[serde(default = "default_b_acc")]
    pub b_acc: WeightInput,
}

impl Default for PomptcSection {
    fn default() -> Self {
        PomptcSection {
            horizon: default_horizon(),
            control_horizon: default_horizon(),
            c_pose: default_c_pose(),
            b_vel: default_b_vel(),
            b_acc: default_b_acc(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kp: Option<GainInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<GainInput>,
    /// Used for whichever of kp/kd is absent (rad/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

fn default_controller() -> Controller {
    Controller::Nftsm
}

fn default_failure_budget() -> usize {
    5
}

/// Raw document shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    #[serde(default = "default_controller")]
    pub controller: Controller,
    #[serde(default = "default_failure_budget")]
    pub failure_budget: usize,
    pub robot: RobotChoice,
    #[serde(default)]
    pub pomptc: PomptcSection,
    #[serde(default)]
    pub ftcnd: FtcndParams,
    #[serde(default)]
    pub nftsm: NftsmParams,
    #[serde(default)]
    pub pd: PdSection,
    pub scenario: ScenarioScript,
}

/// A validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub model: RobotModel,
    pub params: SimParams,
    pub script: ScenarioScript,
}

fn keyed(section: &str, err: Error) -> Error {
    match err {
        Error::InvalidParameter { name, message } => Error::config(format!("{section}.{name}"), message),
        Error::Dimension {
            context,
            expected,
            actual,
        } => Error::config(section, format!("{context}: expected {expected}, got {actual}")),
        other => other,
    }
}

impl ScenarioDocument {
    pub fn resolve(&self) -> Result<Scenario> {
        let model = match &self.robot {
            RobotChoice::Preset { preset, limits } => {
                let mut model = preset.build();
                if let Some(l) = limits {
                    model.limits = l.clone();
                }
                model
            }
            RobotChoice::Explicit(model) => model.clone(),
        };
        model.validate()?;
        let n = model.arm_joint_count();
        let k = model.actuated_count();
        let p = &self.pomptc;
        if p.control_horizon == 0 || p.horizon < p.control_horizon {
            return Err(Error::config(
                "pomptc.control_horizon",
                format!("need horizon >= control_horizon >= 1, got {} and {}", p.horizon, p.control_horizon),
            ));
        }
        let weights = PomptcWeights::new(
            p.c_pose.resolve(6, "pomptc.c_pose")?,
            p.b_vel.resolve(k, "pomptc.b_vel")?,
            p.b_acc.resolve(k, "pomptc.b_acc")?,
        )
        .map_err(|e| keyed("pomptc", e))?;
        self.ftcnd.validate().map_err(|e| keyed("ftcnd", e))?;
        self.nftsm.validate().map_err(|e| keyed("nftsm", e))?;
        self.scenario.validate(n, "scenario")?;

        let bandwidth = self.pd.bandwidth.unwrap_or(PD_BANDWIDTH);
        if !(bandwidth > 0.0) {
            return Err(Error::config("pd.bandwidth", "must be positive"));
        }
        let q0 = DVector::from_column_slice(&self.scenario.initial_arm);
        let tuned = PdGains::critically_damped(&model, &q0, bandwidth);
        let pd = PdGains {
            kp: match &self.pd.kp {
                Some(g) => g.resolve(n, "pd.kp")?,
                None => tuned.kp,
            },
            kd: match &self.pd.kd {
                Some(g) => g.resolve(n, "pd.kd")?,
                None => tuned.kd,
            },
        };
        pd.validate(n).map_err(|e| keyed("pd", e))?;

        Ok(Scenario {
            params: SimParams {
                weights,
                horizon: p.horizon,
                control_horizon: p.control_horizon,
                ftcnd: self.ftcnd,
                nftsm: self.nftsm,
                pd,
                controller: self.controller,
                failure_budget: self.failure_budget,
            },
            model,
            script: self.scenario.clone(),
        })
    }
}

impl Scenario {
    /// Fully explicit document; loading it yields an equal scenario.
    pub fn to_document(&self) -> ScenarioDocument {
        let w = &self.params.weights;
        ScenarioDocument {
            controller: self.params.controller,
            failure_budget: self.params.failure_budget,
            robot: RobotChoice::Explicit(self.model.clone()),
            pomptc: PomptcSection {
                horizon: self.params.horizon,
                control_horizon: self.params.control_horizon,
                c_pose: WeightInput::from_matrix(&w.c_pose),
                b_vel: WeightInput::from_matrix(&w.b_vel),
                b_acc: WeightInput::from_matrix(&w.b_acc),
            },
            ftcnd: self.params.ftcnd,
            nftsm: self.params.nftsm,
            pd: PdSection {
                kp: Some(GainInput::PerJoint(self.params.pd.kp.iter().copied().collect())),
                kd: Some(GainInput::PerJoint(self.params.pd.kd.iter().copied().collect())),
                bandwidth: None,
            },
            scenario: self.script.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_document()).map_err(|e| Error::Parse {
            what: "scenario document".into(),
            message: e.to_string(),
        })
    }
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let doc: ScenarioDocument = toml::from_str(text).map_err(|e| Error::Parse {
        what: "scenario document".into(),
        message: e.to_string(),
    })?;
    doc.resolve()
}

pub fn load_scenario_file(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: format!("cannot read scenario file: {e}"),
    })?;
    load_scenario(&text)
}
