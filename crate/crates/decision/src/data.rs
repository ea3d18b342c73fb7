//! Offline dataset plumbing: collection with scripted policies, horizon
//! windowing with terminal-state padding, invertible normalization, score
//! metrics, and a text-header + f32-blob storage format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmtk_nn::Matrix;

use crate::env::{episode_seed, Env, Policy};
use crate::{Error, Result};

/// One environment step as stored offline. `a` is the commanded action as the
/// behavior policy emitted it; the environment clamps before integrating.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
}

/// Per-dimension summary statistics of one field across a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FieldStats {
    fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> FieldStats {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for row in rows.clone() {
            count += 1;
            for j in 0..dim {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
                mean[j] += row[j];
            }
        }
        if count == 0 {
            return FieldStats { min: vec![0.0; dim], max: vec![0.0; dim], mean: vec![0.0; dim], std: vec![1.0; dim] };
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for j in 0..dim {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        FieldStats { min, max, mean, std }
    }
}

/// An immutable offline dataset: episodes of transitions plus per-episode
/// returns and per-field statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    episodes: Vec<Vec<Transition>>,
    returns: Vec<f64>,
    obs_dim: usize,
    act_dim: usize,
    obs_stats: FieldStats,
    act_stats: FieldStats,
}

impl TrajectoryDataset {
    pub fn new(episodes: Vec<Vec<Transition>>, obs_dim: usize, act_dim: usize) -> Result<Self> {
        for (i, ep) in episodes.iter().enumerate() {
            if ep.is_empty() {
                return Err(Error::Config(format!("episode {i} is empty")));
            }
            for t in ep {
                if t.s.len() != obs_dim || t.s_next.len() != obs_dim || t.a.len() != act_dim {
                    return Err(Error::Config(format!(
                        "episode {i} has inconsistent dimensions (obs {}, action {})",
                        t.s.len(),
                        t.a.len()
                    )));
                }
                let finite = t.s.iter().chain(&t.s_next).chain(&t.a).all(|v| v.is_finite());
                if !finite || !t.r.is_finite() {
                    return Err(Error::Numeric(format!("episode {i} contains non-finite values")));
                }
            }
        }
        let returns = episodes
            .iter()
            .map(|ep| ep.iter().map(|t| t.r).sum())
            .collect();
        let obs_stats = FieldStats::from_rows(
            episodes.iter().flatten().map(|t| t.s.as_slice()),
            obs_dim,
        );
        let act_stats = FieldStats::from_rows(
            episodes.iter().flatten().map(|t| t.a.as_slice()),
            act_dim,
        );
        Ok(TrajectoryDataset { episodes, returns, obs_dim, act_dim, obs_stats, act_stats })
    }

    fn with_returns(mut self, returns: Vec<f64>, obs_stats: FieldStats, act_stats: FieldStats) -> Self {
        self.returns = returns;
        self.obs_stats = obs_stats;
        self.act_stats = act_stats;
        self
    }

    pub fn episodes(&self) -> &[Vec<Transition>] {
        &self.episodes
    }
    pub fn returns(&self) -> &[f64] {
        &self.returns
    }
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn act_dim(&self) -> usize {
        self.act_dim
    }
    pub fn obs_stats(&self) -> &FieldStats {
        &self.obs_stats
    }
    pub fn act_stats(&self) -> &FieldStats {
        &self.act_stats
    }
    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    /// All transitions flattened as rows [s, a, r, s', terminal].
    pub fn flat_transitions(&self) -> Matrix {
        let row_len = 2 * self.obs_dim + self.act_dim + 2;
        let n = self.transition_count();
        let mut m = Matrix::zeros((n, row_len));
        for (i, t) in self.transitions().enumerate() {
            let mut j = 0;
            for v in &t.s {
                m[[i, j]] = *v;
                j += 1;
            }
            for v in &t.a {
                m[[i, j]] = *v;
                j += 1;
            }
            m[[i, j]] = t.r;
            j += 1;
            for v in &t.s_next {
                m[[i, j]] = *v;
                j += 1;
            }
            m[[i, j]] = if t.terminal { 1.0 } else { 0.0 };
        }
        m
    }

    pub fn obs_matrix(&self) -> Matrix {
        rows_to_matrix(self.transitions().map(|t| t.s.as_slice()), self.transition_count(), self.obs_dim)
    }
    pub fn next_obs_matrix(&self) -> Matrix {
        rows_to_matrix(self.transitions().map(|t| t.s_next.as_slice()), self.transition_count(), self.obs_dim)
    }
    pub fn action_matrix(&self) -> Matrix {
        rows_to_matrix(self.transitions().map(|t| t.a.as_slice()), self.transition_count(), self.act_dim)
    }
    pub fn reward_vec(&self) -> Vec<f64> {
        self.transitions().map(|t| t.r).collect()
    }
    pub fn terminal_vec(&self) -> Vec<f64> {
        self.transitions().map(|t| if t.terminal { 1.0 } else { 0.0 }).collect()
    }
}

fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, n: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros((n, dim));
    for (i, row) in rows.enumerate() {
        for j in 0..dim {
            m[[i, j]] = row[j];
        }
    }
    m
}

/// Rolls out `episodes` episodes of the policy. Episode e draws all of its
/// randomness from a fresh stream seeded with `seed + e`, so collection is
/// deterministic and episodes are independent.
pub fn collect(
    env: &dyn Env,
    policy: &mut dyn Policy,
    episodes: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let mut eps = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, e));
        let mut state = env.reset(&mut rng);
        policy.begin_episode(env, &state, &mut rng);
        let mut transitions = Vec::new();
        while !state.terminal {
            let a = policy.act(env, &state, &mut rng);
            let next = env.step(&state, &a)?;
            transitions.push(Transition {
                s: state.observation.clone(),
                a,
                r: next.reward,
                s_next: next.observation.clone(),
                terminal: next.terminal,
            });
            state = next;
        }
        eps.push(transitions);
    }
    TrajectoryDataset::new(eps, env.obs_dim(), env.action_dim())
}

/// A fixed-length trajectory segment. Padded tail steps repeat the episode's
/// terminal state with zero actions and are flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub steps: Vec<Transition>,
    pub valid: Vec<bool>,
    pub episode: usize,
    pub start: usize,
}

/// Cuts every episode into non-overlapping segments of length `h`. Windows
/// never cross episode boundaries; short tails are padded.
pub fn window(ds: &TrajectoryDataset, h: usize) -> Result<Vec<Window>> {
    if h == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (e, ep) in ds.episodes().iter().enumerate() {
        let mut start = 0;
        while start < ep.len() {
            let end = (start + h).min(ep.len());
            let mut steps: Vec<Transition> = ep[start..end].to_vec();
            let mut valid = vec![true; end - start];
            if steps.len() < h {
                let last = ep.last().expect("episodes are non-empty");
                let pad = Transition {
                    s: last.s_next.clone(),
                    a: vec![0.0; ds.act_dim()],
                    r: 0.0,
                    s_next: last.s_next.clone(),
                    terminal: true,
                };
                while steps.len() < h {
                    steps.push(pad.clone());
                    valid.push(false);
                }
            }
            out.push(Window { steps, valid, episode: e, start });
            start += h;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizerKind {
    /// Min/max to [-1, 1].
    MinMax,
    /// Zero mean, unit variance.
    MeanStd,
}

/// Invertible per-dimension affine map x -> (x - shift) / scale. Constant
/// dimensions get scale 1 so the map stays invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub kind: NormalizerKind,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &Matrix, kind: NormalizerKind) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cannot fit a normalizer to non-finite data".into()));
        }
        let rows: Vec<Vec<f64>> = (0..data.nrows()).map(|i| data.row(i).to_vec()).collect();
        let stats = FieldStats::from_rows(rows.iter().map(|r| r.as_slice()), data.ncols());
        Ok(Normalizer::from_stats(&stats, kind))
    }

    pub fn from_stats(stats: &FieldStats, kind: NormalizerKind) -> Self {
        let dim = stats.min.len();
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for j in 0..dim {
            match kind {
                NormalizerKind::MinMax => {
                    shift[j] = (stats.min[j] + stats.max[j]) / 2.0;
                    let half = (stats.max[j] - stats.min[j]) / 2.0;
                    scale[j] = if half > 0.0 { half } else { 1.0 };
                }
                NormalizerKind::MeanStd => {
                    shift[j] = stats.mean[j];
                    scale[j] = if stats.std[j] > 0.0 { stats.std[j] } else { 1.0 };
                }
            }
        }
        Normalizer { kind, shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn forward_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (sh, sc))| (v - sh) / sc)
            .collect()
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (sh, sc))| v * sc + sh)
            .collect()
    }

    pub fn forward(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[[i, j]] = (m[[i, j]] - self.shift[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn inverse(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[[i, j]] = m[[i, j]] * self.scale[j] + self.shift[j];
            }
        }
        out
    }
}

/// 100 x (score - random) / (expert - random).
pub fn normalized_score(score: f64, random_score: f64, expert_score: f64) -> Result<f64> {
    if expert_score == random_score {
        return Err(Error::Domain(
            "normalized score is undefined when expert and random scores coincide".into(),
        ));
    }
    Ok(100.0 * (score - random_score) / (expert_score - random_score))
}

/// Mean of the four subtask success indicators.
pub fn subtask_score(successes: [bool; 4]) -> f64 {
    successes.iter().filter(|s| **s).count() as f64 / 4.0
}

const MAGIC: &str = "dmtk-dataset v1";

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

/// Serializes the dataset: a text header (dimensions, episode lengths,
/// returns, field statistics) followed by the transitions as a little-endian
/// f32 blob, row-major as [s, a, r, s', terminal].
pub fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str(MAGIC);
    text.push('\n');
    text.push_str(&format!("obs_dim {}\n", ds.obs_dim));
    text.push_str(&format!("action_dim {}\n", ds.act_dim));
    text.push_str(&format!("episodes {}\n", ds.episodes.len()));
    let lengths: Vec<String> = ds.episodes.iter().map(|e| e.len().to_string()).collect();
    text.push_str(&format!("lengths {}\n", lengths.join(" ")));
    text.push_str(&format!("returns {}\n", fmt_vec(&ds.returns)));
    for (name, stats) in [("obs", &ds.obs_stats), ("act", &ds.act_stats)] {
        text.push_str(&format!("{name}_min {}\n", fmt_vec(&stats.min)));
        text.push_str(&format!("{name}_max {}\n", fmt_vec(&stats.max)));
        text.push_str(&format!("{name}_mean {}\n", fmt_vec(&stats.mean)));
        text.push_str(&format!("{name}_std {}\n", fmt_vec(&stats.std)));
    }
    text.push_str("end_header\n");
    let mut bytes = text.into_bytes();
    for t in ds.transitions() {
        let mut push = |v: f64| bytes.extend_from_slice(&(v as f32).to_le_bytes());
        for v in &t.s {
            push(*v);
        }
        for v in &t.a {
            push(*v);
        }
        push(t.r);
        for v in &t.s_next {
            push(*v);
        }
        push(if t.terminal { 1.0 } else { 0.0 });
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> HeaderReader<'a> {
    fn line(&mut self) -> Result<(&'a str, u64)> {
        let at = self.offset as u64;
        let rest = &self.bytes[self.offset..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or(Error::Format { offset: at, what: "unterminated header line".into() })?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Format { offset: at, what: "header is not valid UTF-8".into() })?;
        self.offset += end + 1;
        Ok((line, at))
    }

    fn keyed(&mut self, key: &str) -> Result<(&'a str, u64)> {
        let (line, at) = self.line()?;
        match line.strip_prefix(key) {
            Some(rest) if rest.is_empty() => Ok(("", at)),
            Some(rest) if rest.starts_with(' ') => Ok((&rest[1..], at)),
            _ => Err(Error::Format { offset: at, what: format!("expected '{key}' line, found '{line}'") }),
        }
    }
}

fn parse_all<T: std::str::FromStr>(s: &str, at: u64, what: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<T>()
                .map_err(|_| Error::Format { offset: at, what: format!("bad {what} value '{tok}'") })
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(s: &str, at: u64, what: &str) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| Error::Format { offset: at, what: format!("bad {what} value '{s}'") })
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let bytes = std::fs::read(path)?;
    let mut r = HeaderReader { bytes: &bytes, offset: 0 };
    let (magic, at) = r.line()?;
    if magic != MAGIC {
        return Err(Error::Format { offset: at, what: format!("bad magic '{magic}'") });
    }
    let (v, at) = r.keyed("obs_dim")?;
    let obs_dim: usize = parse_one(v, at, "obs_dim")?;
    let (v, at) = r.keyed("action_dim")?;
    let act_dim: usize = parse_one(v, at, "action_dim")?;
    let (v, at) = r.keyed("episodes")?;
    let n_episodes: usize = parse_one(v, at, "episodes")?;
    let (v, at) = r.keyed("lengths")?;
    let lengths: Vec<usize> = parse_all(v, at, "length")?;
    if lengths.len() != n_episodes {
        return Err(Error::Format {
            offset: at,
            what: format!("{} lengths for {n_episodes} episodes", lengths.len()),
        });
    }
    let (v, at) = r.keyed("returns")?;
    let returns: Vec<f64> = parse_all(v, at, "return")?;
    if returns.len() != n_episodes {
        return Err(Error::Format {
            offset: at,
            what: format!("{} returns for {n_episodes} episodes", returns.len()),
        });
    }
    let mut stats = Vec::new();
    for name in ["obs", "act"] {
        let dim = if name == "obs" { obs_dim } else { act_dim };
        let mut fields = Vec::new();
        for part in ["min", "max", "mean", "std"] {
            let (v, at) = r.keyed(&format!("{name}_{part}"))?;
            let vals: Vec<f64> = parse_all(v, at, part)?;
            if vals.len() != dim {
                return Err(Error::Format {
                    offset: at,
                    what: format!("{name}_{part} has {} values, expected {dim}", vals.len()),
                });
            }
            fields.push(vals);
        }
        let std = fields.pop().unwrap();
        let mean = fields.pop().unwrap();
        let max = fields.pop().unwrap();
        let min = fields.pop().unwrap();
        stats.push(FieldStats { min, max, mean, std });
    }
    let act_stats = stats.pop().unwrap();
    let obs_stats = stats.pop().unwrap();
    let (end, at) = r.line()?;
    if end != "end_header" {
        return Err(Error::Format { offset: at, what: format!("expected end_header, found '{end}'") });
    }

    let blob_start = r.offset;
    let row_len = 2 * obs_dim + act_dim + 2;
    let total: usize = lengths.iter().sum();
    let expected = total * row_len * 4;
    let blob = &bytes[blob_start..];
    if blob.len() != expected {
        return Err(Error::Format {
            offset: blob_start as u64,
            what: format!("blob is {} bytes, expected {expected}", blob.len()),
        });
    }
    struct BlobReader<'a> {
        bytes: &'a [u8],
        cursor: usize,
    }
    impl BlobReader<'_> {
        fn next(&mut self) -> f64 {
            let v = f32::from_le_bytes(self.bytes[self.cursor..self.cursor + 4].try_into().unwrap());
            self.cursor += 4;
            v as f64
        }
    }
    let mut rd = BlobReader { bytes: &bytes, cursor: blob_start };
    let mut episodes = Vec::with_capacity(n_episodes);
    for len in &lengths {
        let mut ep = Vec::with_capacity(*len);
        for _ in 0..*len {
            let s: Vec<f64> = (0..obs_dim).map(|_| rd.next()).collect();
            let a: Vec<f64> = (0..act_dim).map(|_| rd.next()).collect();
            let rwd = rd.next();
            let s_next: Vec<f64> = (0..obs_dim).map(|_| rd.next()).collect();
            let flag_at = rd.cursor as u64;
            let flag = rd.next();
            let terminal = if flag == 1.0 {
                true
            } else if flag == 0.0 {
                false
            } else {
                return Err(Error::Format {
                    offset: flag_at,
                    what: format!("terminal flag must be 0 or 1, found {flag}"),
                });
            };
            ep.push(Transition { s, a, r: rwd, s_next, terminal });
        }
        episodes.push(ep);
    }
    let ds = TrajectoryDataset::new(episodes, obs_dim, act_dim)?;
    Ok(ds.with_returns(returns, obs_stats, act_stats))
}

/// One metrics record in the shared CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub algo: String,
    pub env: String,
    pub solver: String,
    pub steps: usize,
    pub seed: u64,
    pub score: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "run_id,algo,env,solver,steps,seed,score";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id, self.algo, self.env, self.solver, self.steps, self.seed, self.score
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{PointMaze, PolicyTier, ScriptedPolicy};
    use tempfile::tempdir;

    fn medium_dataset(episodes: usize, seed: u64) -> TrajectoryDataset {
        let env = PointMaze::open();
        let mut policy = ScriptedPolicy::new(PolicyTier::Medium);
        collect(&env, &mut policy, episodes, seed).unwrap()
    }

    #[test]
    fn collect_is_deterministic_and_counts_episodes() {
        let a = medium_dataset(5, 3);
        let b = medium_dataset(5, 3);
        assert_eq!(a, b);
        assert_eq!(a.episodes().len(), 5);
        assert_eq!(a.returns().len(), 5);
        let c = medium_dataset(5, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_episodes_gives_an_empty_dataset() {
        let env = PointMaze::open();
        let mut policy = ScriptedPolicy::new(PolicyTier::Random);
        let ds = collect(&env, &mut policy, 0, 0).unwrap();
        assert_eq!(ds.episodes().len(), 0);
        assert_eq!(ds.transition_count(), 0);
        assert_eq!(ds.obs_dim(), 2);
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.ds");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.episodes().len(), 0);
    }

    #[test]
    fn expert_returns_beat_random_returns() {
        let env = PointMaze::open();
        let mut expert = ScriptedPolicy::new(PolicyTier::Expert);
        let mut random = ScriptedPolicy::new(PolicyTier::Random);
        let de = collect(&env, &mut expert, 20, 11).unwrap();
        let dr = collect(&env, &mut random, 20, 11).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(de.returns()) > mean(dr.returns()) + 10.0,
            "expert {} vs random {}",
            mean(de.returns()),
            mean(dr.returns())
        );
    }

    #[test]
    fn windows_pad_short_tails_with_the_terminal_state() {
        let mut ep = Vec::new();
        for i in 0..10 {
            ep.push(Transition {
                s: vec![i as f64, 0.0],
                a: vec![1.0, 1.0],
                r: -1.0,
                s_next: vec![i as f64 + 1.0, 0.0],
                terminal: i == 9,
            });
        }
        let ds = TrajectoryDataset::new(vec![ep], 2, 2).unwrap();
        let ws = window(&ds, 16).unwrap();
        assert_eq!(ws.len(), 1);
        let w = &ws[0];
        assert_eq!(w.valid.iter().filter(|v| **v).count(), 10);
        assert_eq!(w.valid.iter().filter(|v| !**v).count(), 6);
        for k in 10..16 {
            assert_eq!(w.steps[k].s, vec![10.0, 0.0]);
            assert_eq!(w.steps[k].a, vec![0.0, 0.0]);
            assert!(w.steps[k].terminal);
            assert!(!w.valid[k]);
        }
    }

    #[test]
    fn exact_length_episodes_produce_one_unpadded_window() {
        let ep: Vec<Transition> = (0..8)
            .map(|i| Transition {
                s: vec![i as f64],
                a: vec![0.5],
                r: 0.0,
                s_next: vec![i as f64 + 1.0],
                terminal: i == 7,
            })
            .collect();
        let ds = TrajectoryDataset::new(vec![ep], 1, 1).unwrap();
        let ws = window(&ds, 8).unwrap();
        assert_eq!(ws.len(), 1);
        assert!(ws[0].valid.iter().all(|v| *v));
        // 19 steps at H = 8: windows at 0, 8, 16; the last has 5 pads.
        let ep19: Vec<Transition> = (0..19)
            .map(|i| Transition {
                s: vec![i as f64],
                a: vec![0.5],
                r: 0.0,
                s_next: vec![i as f64 + 1.0],
                terminal: i == 18,
            })
            .collect();
        let ds = TrajectoryDataset::new(vec![ep19], 1, 1).unwrap();
        let ws = window(&ds, 8).unwrap();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[2].valid.iter().filter(|v| !**v).count(), 5);
    }

    #[test]
    fn valid_flags_account_for_every_transition() {
        let ds = medium_dataset(7, 21);
        for h in [1, 4, 16, 33] {
            let ws = window(&ds, h).unwrap();
            let valid: usize = ws
                .iter()
                .map(|w| w.valid.iter().filter(|v| **v).count())
                .sum();
            assert_eq!(valid, ds.transition_count(), "H = {h}");
        }
    }

    #[test]
    fn normalizer_roundtrip_and_ranges() {
        let ds = medium_dataset(10, 33);
        let obs = ds.obs_matrix();
        let minmax = Normalizer::fit(&obs, NormalizerKind::MinMax).unwrap();
        let fwd = minmax.forward(&obs);
        for v in fwd.iter() {
            assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12);
        }
        let back = minmax.inverse(&fwd);
        for (a, b) in back.iter().zip(obs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let meanstd = Normalizer::fit(&obs, NormalizerKind::MeanStd).unwrap();
        let fwd = meanstd.forward(&obs);
        for j in 0..2 {
            let col: Vec<f64> = (0..fwd.nrows()).map(|i| fwd[[i, j]]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_dimensions_normalize_without_dividing_by_zero() {
        let data = Matrix::from_elem((5, 2), 3.5);
        for kind in [NormalizerKind::MinMax, NormalizerKind::MeanStd] {
            let n = Normalizer::fit(&data, kind).unwrap();
            let fwd = n.forward(&data);
            assert!(fwd.iter().all(|v| v.is_finite()));
            let back = n.inverse(&fwd);
            for v in back.iter() {
                assert!((v - 3.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn windowed_states_roundtrip_through_the_normalizer() {
        let ds = medium_dataset(6, 44);
        let norm = Normalizer::from_stats(ds.obs_stats(), NormalizerKind::MinMax);
        for w in window(&ds, 8).unwrap() {
            for step in &w.steps {
                let back = norm.inverse_row(&norm.forward_row(&step.s));
                for (a, b) in back.iter().zip(&step.s) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn normalized_score_pinned_values() {
        assert_eq!(normalized_score(110.0, 10.0, 110.0).unwrap(), 100.0);
        assert_eq!(normalized_score(10.0, 10.0, 110.0).unwrap(), 0.0);
        assert_eq!(normalized_score(60.0, 10.0, 110.0).unwrap(), 50.0);
        assert!(matches!(normalized_score(5.0, 7.0, 7.0), Err(Error::Domain(_))));
    }

    #[test]
    fn normalized_score_is_affine_invariant() {
        let (s, r, e) = (37.0, -12.0, 88.0);
        let base = normalized_score(s, r, e).unwrap();
        for (a, b) in [(2.0, 5.0), (0.1, -3.0), (1000.0, 0.0)] {
            let mapped = normalized_score(a * s + b, a * r + b, a * e + b).unwrap();
            assert!((mapped - base).abs() < 1e-9);
        }
    }

    #[test]
    fn subtask_score_averages_indicators() {
        assert_eq!(subtask_score([true; 4]), 1.0);
        assert_eq!(subtask_score([false; 4]), 0.0);
        assert_eq!(subtask_score([true, true, false, false]), 0.5);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ds = medium_dataset(4, 55);
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ds");
        let p2 = dir.path().join("b.ds");
        save_dataset(&ds, &p1).unwrap();
        let loaded = load_dataset(&p1).unwrap();
        save_dataset(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        // Loaded values match the original up to the f32 storage rounding.
        assert_eq!(loaded.episodes().len(), ds.episodes().len());
        for (le, oe) in loaded.episodes().iter().zip(ds.episodes()) {
            assert_eq!(le.len(), oe.len());
            for (lt, ot) in le.iter().zip(oe) {
                for (a, b) in lt.s.iter().zip(&ot.s) {
                    assert_eq!(*a, *b as f32 as f64);
                }
                assert_eq!(lt.terminal, ot.terminal);
            }
        }
    }

    #[test]
    fn corrupted_files_are_format_errors_with_offsets() {
        let ds = medium_dataset(2, 66);
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ds");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncated blob.
        let cut = dir.path().join("cut.ds");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        match load_dataset(&cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }

        // Bad magic reports offset 0.
        let bad = dir.path().join("bad.ds");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad, &b).unwrap();
        match load_dataset(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        // Header claiming more transitions than the blob holds.
        let text_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let header = String::from_utf8(bytes[..text_end].to_vec()).unwrap();
        let grown = header.replace("lengths ", "lengths 999 ");
        let grown = grown.replace("episodes 2", "episodes 3");
        let grown = grown.replace("returns ", "returns 0 ");
        let mut b = grown.into_bytes();
        b.extend_from_slice(&bytes[text_end..]);
        let mism = dir.path().join("mism.ds");
        std::fs::write(&mism, &b).unwrap();
        assert!(matches!(load_dataset(&mism), Err(Error::Format { .. })));
    }

    #[test]
    fn metrics_rows_render_the_shared_schema() {
        let row = MetricsRow {
            run_id: "r1".into(),
            algo: "dql".into(),
            env: "pointmaze-open".into(),
            solver: "ddpm".into(),
            steps: 5,
            seed: 3,
            score: 0.5,
        };
        assert_eq!(MetricsRow::HEADER, "run_id,algo,env,solver,steps,seed,score");
        assert_eq!(row.to_csv(), "r1,dql,pointmaze-open,ddpm,5,3,0.5");
    }

    #[test]
    fn flat_transitions_layout() {
        let ds = medium_dataset(1, 77);
        let flat = ds.flat_transitions();
        assert_eq!(flat.ncols(), 2 + 2 + 1 + 2 + 1);
        let first = ds.transitions().next().unwrap();
        assert_eq!(flat[[0, 0]], first.s[0]);
        assert_eq!(flat[[0, 2]], first.a[0]);
        assert_eq!(flat[[0, 4]], first.r);
        assert_eq!(flat[[0, 5]], first.s_next[0]);
        assert_eq!(flat[[0, 7]], if first.terminal { 1.0 } else { 0.0 });
    }
}
