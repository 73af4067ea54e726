//! Offline transition datasets.

mod format;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use format::{read_dataset, write_dataset, decode_dataset, encode_dataset, MAGIC, FORMAT_VERSION};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Low-level goal of the collecting agent; empty for goal-free environments.
    pub goal: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Dataset-level metadata stored in the file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub state_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub env: String,
    pub grade: String,
    pub seed: u64,
}

/// Transitions are stored at f32 precision, so every value is rounded
/// through f32 on insertion. In-memory datasets therefore equal what a
/// write/read cycle produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    transitions: Vec<Transition>,
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

impl Dataset {
    pub fn new(meta: DatasetMeta) -> Self {
        Self {
            meta,
            transitions: Vec::new(),
        }
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    /// Floats per record: state, action, goal, reward, next_state, done.
    pub fn record_floats(&self) -> usize {
        2 * self.meta.state_dim + self.meta.action_dim + self.meta.goal_dim + 2
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        let m = &self.meta;
        if t.state.len() != m.state_dim {
            return Err(Error::dim("transition state", m.state_dim, t.state.len()));
        }
        if t.next_state.len() != m.state_dim {
            return Err(Error::dim("transition next_state", m.state_dim, t.next_state.len()));
        }
        if t.action.len() != m.action_dim {
            return Err(Error::dim("transition action", m.action_dim, t.action.len()));
        }
        if t.goal.len() != m.goal_dim {
            return Err(Error::dim("transition goal", m.goal_dim, t.goal.len()));
        }
        self.transitions.push(Transition {
            state: quantize(&t.state),
            action: quantize(&t.action),
            goal: quantize(&t.goal),
            reward: t.reward as f32 as f64,
            next_state: quantize(&t.next_state),
            done: t.done,
        });
        Ok(())
    }

    /// Builds a dataset over a subset of this one's transitions.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            transitions: indices.iter().map(|&i| self.transitions[i].clone()).collect(),
        }
    }

    /// Indices of transitions that begin an episode: the first record and
    /// every record following a `done` marker.
    pub fn episode_starts(&self) -> Vec<usize> {
        let mut starts = Vec::new();
        for i in 0..self.transitions.len() {
            if i == 0 || self.transitions[i - 1].done {
                starts.push(i);
            }
        }
        starts
    }

    /// Undiscounted return of each complete episode (a trailing episode
    /// without a `done` marker is excluded).
    pub fn episode_returns(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for t in &self.transitions {
            acc += t.reward;
            if t.done {
                out.push(acc);
                acc = 0.0;
            }
        }
        out
    }

    pub fn mean_episode_return(&self) -> f64 {
        let r = self.episode_returns();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    pub fn mean_step_reward(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.transitions.iter().map(|t| t.reward).sum::<f64>() / self.len() as f64
    }
}

/// Per-dimension normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and std over `rows`, std floored at [`STD_FLOOR`].
    pub fn from_rows<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: Iterator<Item = &'a [f64]> + Clone,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Config("cannot compute statistics of an empty dataset".into()));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s));
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// State statistics (plus action and goal statistics) of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub state: NormStats,
    pub action: NormStats,
    pub goal: Option<NormStats>,
}

pub fn compute_norm_stats(dataset: &Dataset) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot compute statistics of an empty dataset".into()));
    }
    let t = dataset.transitions();
    let state = NormStats::from_rows(t.iter().map(|t| t.state.as_slice()), dataset.meta.state_dim)?;
    let action = NormStats::from_rows(t.iter().map(|t| t.action.as_slice()), dataset.meta.action_dim)?;
    let goal = if dataset.meta.goal_dim > 0 {
        Some(NormStats::from_rows(t.iter().map(|t| t.goal.as_slice()), dataset.meta.goal_dim)?)
    } else {
        None
    };
    Ok(DatasetStats { state, action, goal })
}

/// Seeded shuffle-and-cut into `(train, validation)` index sets.
pub fn split_indices(len: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (len as f64 * train_fraction).round() as usize;
    let val = idx.split_off(cut.min(len));
    Ok((idx, val))
}

pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, va) = split_indices(dataset.len(), train_fraction, seed)?;
    Ok((dataset.subset(&tr), dataset.subset(&va)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(states: &[f64]) -> Dataset {
        let mut d = Dataset::new(DatasetMeta {
            state_dim: 1,
            action_dim: 1,
            goal_dim: 0,
            env: "toy".into(),
            grade: "medium".into(),
            seed: 0,
        });
        for (i, &s) in states.iter().enumerate() {
            d.push(Transition {
                state: vec![s],
                action: vec![0.0],
                goal: vec![],
                reward: 1.0,
                next_state: vec![s],
                done: i % 10 == 9,
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn stats_of_identical_states_hit_the_floor() {
        let d = toy(&[3.0; 5]);
        let st = compute_norm_stats(&d).unwrap();
        assert_eq!(st.state.mean, vec![3.0]);
        assert_eq!(st.state.std, vec![STD_FLOOR]);
    }

    #[test]
    fn stats_arithmetic() {
        let st = compute_norm_stats(&toy(&[0.0, 2.0])).unwrap();
        assert_eq!(st.state.mean, vec![1.0]);
        assert_eq!(st.state.std, vec![1.0]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(compute_norm_stats(&toy(&[])).is_err());
    }

    #[test]
    fn split_sizes_follow_fraction() {
        let d = toy(&(0..100).map(f64::from).collect::<Vec<_>>());
        let (a, b) = split(&d, 0.85, 1).unwrap();
        assert_eq!((a.len(), b.len()), (85, 15));
        let (a, b) = split(&d, 0.90, 1).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert!(split(&d, 1.0, 1).is_err());
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let (a, b) = split_indices(57, 0.7, 9).unwrap();
        let (a2, b2) = split_indices(57, 0.7, 9).unwrap();
        assert_eq!((&a, &b), (&a2, &b2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn push_rejects_wrong_dims() {
        let mut d = toy(&[]);
        let bad = Transition {
            state: vec![1.0, 2.0],
            action: vec![0.0],
            goal: vec![],
            reward: 0.0,
            next_state: vec![1.0],
            done: false,
        };
        assert!(matches!(d.push(bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn episode_bookkeeping() {
        let d = toy(&[0.0; 25]);
        assert_eq!(d.episode_starts(), vec![0, 10, 20]);
        assert_eq!(d.episode_returns(), vec![10.0, 10.0]);
    }
}
