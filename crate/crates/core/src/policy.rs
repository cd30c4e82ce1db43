//! Observation/action data model, the five-method policy contract, and a
//! conformance suite every backbone must pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Parameterized, Scope};
use crate::numkit::{derive_seed, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsDims {
    pub img: usize,
    pub txt: usize,
    pub prop: usize,
}

impl Default for ObsDims {
    fn default() -> Self {
        Self {
            img: 32,
            txt: 16,
            prop: 8,
        }
    }
}

impl ObsDims {
    pub fn flat_len(&self) -> usize {
        2 * self.img + self.txt + self.prop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkShape {
    pub horizon: usize,
    pub action_dim: usize,
}

impl Default for ChunkShape {
    fn default() -> Self {
        Self {
            horizon: 10,
            action_dim: 7,
        }
    }
}

impl ChunkShape {
    pub fn len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_view: Vec<f64>,
    pub wrist_view: Vec<f64>,
    pub instruction: Vec<f64>,
    pub proprio: Vec<f64>,
}

impl Observation {
    pub fn zeros(dims: ObsDims) -> Self {
        Self {
            agent_view: vec![0.0; dims.img],
            wrist_view: vec![0.0; dims.img],
            instruction: vec![0.0; dims.txt],
            proprio: vec![0.0; dims.prop],
        }
    }

    pub fn random(dims: ObsDims, rng: &mut RngState) -> Self {
        Self {
            agent_view: rng.gaussian_vec(dims.img),
            wrist_view: rng.gaussian_vec(dims.img),
            instruction: rng.gaussian_vec(dims.txt),
            proprio: rng.gaussian_vec(dims.prop),
        }
    }

    pub fn validate(&self, dims: ObsDims) -> Result<()> {
        let lens = [
            ("agent_view", self.agent_view.len(), dims.img),
            ("wrist_view", self.wrist_view.len(), dims.img),
            ("instruction", self.instruction.len(), dims.txt),
            ("proprio", self.proprio.len(), dims.prop),
        ];
        for (field, got, want) in lens {
            if got != want {
                return Err(Error::Config(format!("{field} has length {got}, expected {want}")));
            }
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::arg("observation contains non-finite values"));
        }
        Ok(())
    }

    /// `[agent_view, wrist_view, instruction, proprio]`.
    pub fn flatten(&self) -> Vec<f64> {
        [
            self.agent_view.as_slice(),
            &self.wrist_view,
            &self.instruction,
            &self.proprio,
        ]
        .concat()
    }
}

/// `T×A` block of continuous actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk(Matrix);

impl ActionChunk {
    pub fn new(actions: Matrix) -> Result<Self> {
        if actions.rows() == 0 || actions.cols() == 0 {
            return Err(Error::shape("action chunk needs T ≥ 1 and A ≥ 1"));
        }
        Ok(Self(actions))
    }

    pub fn zeros(shape: ChunkShape) -> Self {
        Self(Matrix::zeros(shape.horizon, shape.action_dim))
    }

    pub fn from_flat(shape: ChunkShape, data: Vec<f64>) -> Result<Self> {
        Self::new(Matrix::from_vec(shape.horizon, shape.action_dim, data)?)
    }

    pub fn shape(&self) -> ChunkShape {
        ChunkShape {
            horizon: self.0.rows(),
            action_dim: self.0.cols(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.0.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn action(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    pub fn ensure_shape(&self, shape: ChunkShape) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(format!(
                "chunk is {}x{}, policy expects {}x{}",
                self.horizon(),
                self.action_dim(),
                shape.horizon,
                shape.action_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Batch {
    pub observations: Vec<Observation>,
}

impl Batch {
    pub fn single(obs: Observation) -> Self {
        Self {
            observations: vec![obs],
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// The cross-paradigm contract.
///
/// `seed` in the log-probability methods fixes any stochastic part of the
/// estimator (the flow backbone's noise draw and t-grid). Every batch element
/// shares it, and `_with_ref` evaluates both networks with it.
pub trait Policy: Send + Sync {
    type Encoded: Clone + PartialEq + std::fmt::Debug + Send + Sync;

    fn obs_dims(&self) -> ObsDims;
    fn chunk_shape(&self) -> ChunkShape;

    fn encode_obs(&self, obs: &Observation) -> Result<Self::Encoded>;

    /// One log-probability per `(observation, chunk)` pair.
    fn policy_logp(&self, batch: &Batch, chunks: &[ActionChunk], seed: u64) -> Result<Vec<f64>>;

    /// `(current, reference)` per pair.
    fn policy_logp_with_ref(
        &self,
        batch: &Batch,
        chunks: &[ActionChunk],
        seed: u64,
    ) -> Result<Vec<(f64, f64)>>;

    /// `K` samples per observation, shape `(B, K, T, A)`.
    fn policy_sample(&self, batch: &Batch, k: usize, seed: u64) -> Result<Vec<Vec<ActionChunk>>> {
        batch
            .observations
            .iter()
            .enumerate()
            .map(|(b, obs)| {
                (0..k)
                    .map(|j| {
                        self.sample_actions(obs, 0, derive_seed(seed, (b * k + j) as u64))
                    })
                    .collect()
            })
            .collect()
    }

    /// One `(T, A)` chunk for the environment. `num_steps = 0` selects the
    /// backbone's default step count.
    fn sample_actions(&self, obs: &Observation, num_steps: usize, seed: u64) -> Result<ActionChunk>;
}

/// Sampling from a pre-computed encoding, used to model stale conditioning.
pub trait ConditionedSampler: Policy {
    fn sample_encoded(&self, enc: &Self::Encoded, num_steps: usize, seed: u64) -> Result<ActionChunk>;
}

/// What preference training needs beyond the contract.
pub trait TrainablePolicy: Policy + Parameterized + Clone {
    /// Current log-probability and its gradient with respect to the
    /// parameters of `scope`.
    fn logp_and_grad(
        &self,
        obs: &Observation,
        chunk: &ActionChunk,
        seed: u64,
        scope: Scope,
    ) -> Result<(f64, Vec<f64>)>;

    /// Log-probability under the reference snapshot.
    fn reference_logp(&self, obs: &Observation, chunk: &ActionChunk, seed: u64) -> Result<f64>;

    /// Freezes the current parameters as the reference.
    fn snapshot_reference(&mut self);

    fn has_reference(&self) -> bool;
}

pub(crate) fn check_batch(batch: &Batch, chunks: &[ActionChunk]) -> Result<()> {
    if batch.len() != chunks.len() {
        return Err(Error::shape(format!(
            "{} observations but {} chunks",
            batch.len(),
            chunks.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub checks: Vec<CheckOutcome>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const SUITE_BATCH: usize = 2;
const SUITE_K: usize = 3;

/// Runs the contract checks. Expects a policy whose reference snapshot was
/// taken at adapter init, so the `cur == ref` check is exact.
pub fn conformance_suite<P: Policy>(policy: &P, seed: u64) -> ConformanceReport {
    let mut checks = Vec::new();
    let mut record = |name: &str, outcome: Result<String>| {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        checks.push(CheckOutcome {
            name: name.to_owned(),
            passed,
            detail,
        });
    };

    let dims = policy.obs_dims();
    let shape = policy.chunk_shape();
    let mut rng = RngState::new(seed);
    let batch = Batch {
        observations: (0..SUITE_BATCH).map(|_| Observation::random(dims, &mut rng)).collect(),
    };
    let obs = &batch.observations[0];

    record(
        "encode_obs_pure",
        (|| {
            let a = policy.encode_obs(obs)?;
            let b = policy.encode_obs(obs)?;
            if a != b {
                return Err(Error::Contract("two encodings of one observation differ".into()));
            }
            Ok("identical encodings".into())
        })(),
    );

    record(
        "sample_actions_shape",
        policy.sample_actions(obs, 0, seed).and_then(|c| {
            c.ensure_shape(shape)?;
            Ok(format!("({}, {})", c.horizon(), c.action_dim()))
        }),
    );

    record(
        "sample_actions_deterministic",
        (|| {
            let a = policy.sample_actions(obs, 0, seed)?;
            let b = policy.sample_actions(obs, 0, seed)?;
            let same = a.shape() == b.shape()
                && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(Error::Contract("fixed seed produced different chunks".into()));
            }
            Ok("bit-identical".into())
        })(),
    );

    let samples = policy.policy_sample(&batch, SUITE_K, seed);
    record(
        "policy_sample_shape",
        samples.as_ref().map_err(clone_err).and_then(|s| {
            if s.len() != SUITE_BATCH || s.iter().any(|row| row.len() != SUITE_K) {
                return Err(Error::shape(format!(
                    "expected ({SUITE_BATCH}, {SUITE_K}, ..), got {} rows",
                    s.len()
                )));
            }
            for c in s.iter().flatten() {
                c.ensure_shape(shape)?;
            }
            Ok(format!("({SUITE_BATCH}, {SUITE_K}, {}, {})", shape.horizon, shape.action_dim))
        }),
    );

    let first_samples: Result<Vec<ActionChunk>> = samples
        .as_ref()
        .map_err(clone_err)
        .map(|s| s.iter().filter_map(|row| row.first().cloned()).collect());

    record(
        "logp_finite",
        first_samples.as_ref().map_err(clone_err).and_then(|chunks| {
            let lp = policy.policy_logp(&batch, chunks, seed)?;
            match lp.iter().position(|v| !v.is_finite()) {
                Some(i) => Err(Error::NonFinite {
                    index: i,
                    context: format!("policy_logp = {lp:?}"),
                }),
                None => Ok(format!("{lp:?}")),
            }
        }),
    );

    record(
        "logp_with_ref_identity",
        first_samples.as_ref().map_err(clone_err).and_then(|chunks| {
            let pairs = policy.policy_logp_with_ref(&batch, chunks, seed)?;
            for (i, (cur, reference)) in pairs.iter().enumerate() {
                if cur.to_bits() != reference.to_bits() {
                    return Err(Error::Contract(format!(
                        "element {i}: cur {cur} differs from ref {reference}"
                    )));
                }
            }
            Ok("cur - ref = 0".into())
        }),
    );

    ConformanceReport { checks }
}

fn clone_err(e: &Error) -> Error {
    Error::Contract(e.to_string())
}
