use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{ChainError, GeneratorMatrix};

/// A piecewise-constant, right-continuous chain trajectory on `[0, horizon]`
/// with finitely many jumps.
///
/// The value on `[t_n, t_{n+1})` is `states[n]`, with `t_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingPath {
    horizon: f64,
    jump_times: Vec<f64>,
    states: Vec<usize>,
}

impl SwitchingPath {
    /// Builds a path from its initial state and a list of `(time, new state)` jumps.
    pub fn new(
        horizon: f64,
        initial: usize,
        jumps: impl IntoIterator<Item = (f64, usize)>,
    ) -> Result<Self, ChainError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ChainError::InvalidPath(format!("horizon {horizon} must be positive")));
        }
        let mut jump_times = Vec::new();
        let mut states = vec![initial];
        let mut last_t = 0.0;
        for (t, s) in jumps {
            if !(t > last_t) || t > horizon {
                return Err(ChainError::InvalidPath(format!(
                    "jump time {t} not in ({last_t}, {horizon}]"
                )));
            }
            if s == *states.last().unwrap() {
                return Err(ChainError::InvalidPath(format!(
                    "jump at {t} does not change the state {s}"
                )));
            }
            jump_times.push(t);
            states.push(s);
            last_t = t;
        }
        Ok(Self {
            horizon,
            jump_times,
            states,
        })
    }

    pub fn constant(horizon: f64, state: usize) -> Self {
        Self {
            horizon,
            jump_times: Vec::new(),
            states: vec![state],
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    /// Visited states `ι_0, ι_1, …, ι_k`.
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn initial_state(&self) -> usize {
        self.states[0]
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Jumps as `(time, from, to)`.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        self.jump_times
            .iter()
            .enumerate()
            .map(move |(n, &t)| (t, self.states[n], self.states[n + 1]))
    }

    /// Right-continuous value `α(t)`.
    pub fn state_at(&self, t: f64) -> usize {
        let n = self.jump_times.partition_point(|&s| s <= t);
        self.states[n]
    }

    /// Left limit `α(t-)`; equals `α(0)` at `t = 0`.
    pub fn state_before(&self, t: f64) -> usize {
        let n = self.jump_times.partition_point(|&s| s < t);
        self.states[n]
    }

    /// Constant pieces `(start, end, state)` covering `[0, horizon]`.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        (0..self.states.len()).map(move |n| {
            let start = if n == 0 { 0.0 } else { self.jump_times[n - 1] };
            let end = self.jump_times.get(n).copied().unwrap_or(self.horizon);
            (start, end, self.states[n])
        })
    }

    /// Lebesgue time spent in `state` on `[0, t]`.
    pub fn occupation(&self, state: usize, t: f64) -> f64 {
        self.segments()
            .take_while(|&(start, _, _)| start < t)
            .filter(|&(_, _, s)| s == state)
            .map(|(start, end, _)| end.min(t) - start)
            .sum()
    }

    /// Number of jumps `from → to` in `(0, t]`.
    pub fn count_transitions(&self, from: usize, to: usize, t: f64) -> usize {
        self.jumps()
            .filter(|&(s, a, b)| s <= t && a == from && b == to)
            .count()
    }

    /// The same path cut at `horizon` (which must not exceed the current one).
    pub fn truncate(&self, horizon: f64) -> Result<Self, ChainError> {
        if !(horizon > 0.0) || horizon > self.horizon {
            return Err(ChainError::TimeOutOfRange {
                t: horizon,
                horizon: self.horizon,
            });
        }
        let k = self.jump_times.partition_point(|&s| s <= horizon);
        Ok(Self {
            horizon,
            jump_times: self.jump_times[..k].to_vec(),
            states: self.states[..=k].to_vec(),
        })
    }

    /// CSV with header `jump_time,state`; the first row is the initial state at time 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("jump_time,state\n");
        out.push_str(&format!("0,{}\n", self.states[0]));
        for (t, _, to) in self.jumps() {
            out.push_str(&format!("{t:?},{to}\n"));
        }
        out
    }
}

/// Exact event-driven sample of the chain on `[0, horizon]`.
///
/// Holding times in state `i` are exponential with rate `-q_ii`; the next
/// state is `j` with probability `q_ij / -q_ii`. Absorbing states hold forever.
pub fn sample_path<R: Rng + ?Sized>(
    q: &GeneratorMatrix,
    initial: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<SwitchingPath, ChainError> {
    if initial >= q.size() {
        return Err(ChainError::UnknownState(initial));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(ChainError::InvalidPath(format!("horizon {horizon} must be positive")));
    }
    let mut t = 0.0;
    let mut state = initial;
    let mut jump_times = Vec::new();
    let mut states = vec![initial];
    loop {
        let rate = q.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        t += Exp::new(rate).expect("positive rate").sample(rng);
        if t > horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = state;
        for j in 0..q.size() {
            if j == state {
                continue;
            }
            let r = q.rate(state, j);
            if r <= 0.0 {
                continue;
            }
            acc += r;
            next = j;
            if u < acc {
                break;
            }
        }
        jump_times.push(t);
        states.push(next);
        state = next;
    }
    Ok(SwitchingPath {
        horizon,
        jump_times,
        states,
    })
}

/// `M_ij(t) = [M_ij](t) - ⟨M_ij⟩(t)` for one ordered pair of states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDecomposition {
    pub pair: (usize, usize),
    pub time: f64,
    /// Number of `i → j` jumps in `(0, t]`.
    pub optional_variation: u64,
    /// `q_ij` times the occupation time of `i` on `[0, t]`.
    pub predictable_variation: f64,
}

impl MartingaleDecomposition {
    pub fn martingale(&self) -> f64 {
        self.optional_variation as f64 - self.predictable_variation
    }
}

/// Jump-count martingale of the pair `(from, to)` along a path, evaluated at `t`.
///
/// The diagonal pair is identically zero by convention.
pub fn martingale_decomposition(
    path: &SwitchingPath,
    q: &GeneratorMatrix,
    pair: (usize, usize),
    t: f64,
) -> Result<MartingaleDecomposition, ChainError> {
    if !(0.0..=path.horizon()).contains(&t) {
        return Err(ChainError::TimeOutOfRange {
            t,
            horizon: path.horizon(),
        });
    }
    let (from, to) = pair;
    if from >= q.size() || to >= q.size() {
        return Err(ChainError::UnknownState(from.max(to)));
    }
    if from == to {
        return Ok(MartingaleDecomposition {
            pair,
            time: t,
            optional_variation: 0,
            predictable_variation: 0.0,
        });
    }
    Ok(MartingaleDecomposition {
        pair,
        time: t,
        optional_variation: path.count_transitions(from, to, t) as u64,
        predictable_variation: q.rate(from, to) * path.occupation(from, t),
    })
}
