use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use serde::{Deserialize, Serialize};

use super::ServeError;
use crate::kvtext;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Conversation,
    LongContext,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Conversation => "conversation",
            TraceKind::LongContext => "long_context",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ServeError> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "conversation" | "conv" => Ok(TraceKind::Conversation),
            "long_context" | "long" => Ok(TraceKind::LongContext),
            _ => Err(ServeError::Trace(format!("unknown trace kind {s:?}"))),
        }
    }
}

/// One round of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub session_id: String,
    pub round: usize,
    /// Tokens of context that precede this round and must be restored.
    pub history_tokens: usize,
    pub new_prompt_tokens: usize,
    pub output_budget: usize,
    pub arrival_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceParams {
    pub kind: TraceKind,
    pub sessions: usize,
    pub rounds: usize,
    /// Session arrivals per second.
    pub rate: f64,
    pub mean_input: f64,
    pub mean_output: f64,
    pub round_gap_s: f64,
    pub context_min: usize,
    pub context_max: usize,
    /// Long-context inputs and outputs are drawn from `1..=short_max`.
    pub short_max: usize,
    /// Caps on sampled conversation lengths; zero means uncapped.
    pub max_input: usize,
    pub max_output: usize,
    pub seed: u64,
}

impl TraceParams {
    pub fn conversation(seed: u64) -> Self {
        Self {
            kind: TraceKind::Conversation,
            sessions: 8,
            rounds: 5,
            rate: 0.5,
            mean_input: 66.8,
            mean_output: 358.8,
            round_gap_s: 30.0,
            context_min: 4096,
            context_max: 16384,
            short_max: 99,
            max_input: 0,
            max_output: 0,
            seed,
        }
    }

    pub fn long_context(seed: u64) -> Self {
        Self { kind: TraceKind::LongContext, rounds: 1, ..Self::conversation(seed) }
    }

    pub fn validate(&self) -> Result<(), ServeError> {
        let bad = |m: &str| Err(ServeError::Trace(m.to_string()));
        if self.sessions == 0 || self.rounds == 0 {
            return bad("sessions and rounds must be >= 1");
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad("rate must be positive");
        }
        if !(self.mean_input >= 1.0 && self.mean_output >= 1.0) {
            return bad("mean lengths must be >= 1");
        }
        if !(self.round_gap_s >= 0.0) {
            return bad("round_gap_s must be >= 0");
        }
        if self.context_min == 0 || self.context_min > self.context_max {
            return bad("need 1 <= context_min <= context_max");
        }
        if self.short_max == 0 {
            return bad("short_max must be >= 1");
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.as_str().to_string()),
            ("sessions", self.sessions.to_string()),
            ("rounds", self.rounds.to_string()),
            ("rate", self.rate.to_string()),
            ("mean_input", self.mean_input.to_string()),
            ("mean_output", self.mean_output.to_string()),
            ("round_gap_s", self.round_gap_s.to_string()),
            ("context_min", self.context_min.to_string()),
            ("context_max", self.context_max.to_string()),
            ("short_max", self.short_max.to_string()),
            ("max_input", self.max_input.to_string()),
            ("max_output", self.max_output.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Override fields from `key=value` pairs; unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ServeError> {
        let bad = || ServeError::Trace(format!("bad value for {key}: {value:?}"));
        let u = || value.parse::<usize>().map_err(|_| bad());
        let f = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "kind" => self.kind = TraceKind::parse(value)?,
            "sessions" => self.sessions = u()?,
            "rounds" => self.rounds = u()?,
            "rate" => self.rate = f()?,
            "mean_input" => self.mean_input = f()?,
            "mean_output" => self.mean_output = f()?,
            "round_gap_s" => self.round_gap_s = f()?,
            "context_min" => self.context_min = u()?,
            "context_max" => self.context_max = u()?,
            "short_max" => self.short_max = u()?,
            "max_input" => self.max_input = u()?,
            "max_output" => self.max_output = u()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(ServeError::Trace(format!("unknown trace parameter {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub params: TraceParams,
    /// Sorted by arrival.
    pub requests: Vec<Request>,
}

fn geometric_len(rng: &mut ChaCha8Rng, mean: f64, cap: usize) -> usize {
    let g = Geometric::new(1.0 / mean).expect("mean >= 1");
    let n = 1 + g.sample(rng) as usize;
    if cap > 0 {
        n.min(cap)
    } else {
        n
    }
}

/// Synthetic workload. Sessions arrive as a Poisson process; each later round
/// arrives a fixed gap after the previous one, and its history is everything
/// the session has seen so far.
pub fn gen_trace(params: &TraceParams) -> Result<Trace, ServeError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let gaps = Exp::new(params.rate).expect("positive rate");
    let mut start = 0.0f64;
    let mut requests = Vec::new();
    for s in 0..params.sessions {
        if s > 0 {
            start += gaps.sample(&mut rng);
        }
        let mut history = match params.kind {
            TraceKind::Conversation => 0,
            TraceKind::LongContext => rng.gen_range(params.context_min..=params.context_max),
        };
        for r in 0..params.rounds {
            let (input, output) = match params.kind {
                TraceKind::Conversation => (
                    geometric_len(&mut rng, params.mean_input, params.max_input),
                    geometric_len(&mut rng, params.mean_output, params.max_output),
                ),
                TraceKind::LongContext => {
                    (rng.gen_range(1..=params.short_max), rng.gen_range(1..=params.short_max))
                }
            };
            requests.push(Request {
                session_id: format!("s{s:04}"),
                round: r,
                history_tokens: history,
                new_prompt_tokens: input,
                output_budget: output,
                arrival_s: start + r as f64 * params.round_gap_s,
            });
            history += input + output;
        }
    }
    requests.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.session_id.cmp(&b.session_id)));
    Ok(Trace { params: params.clone(), requests })
}

impl Trace {
    /// CSV with the generator parameters as leading `# key=value` lines.
    pub fn to_csv(&self) -> Result<String, ServeError> {
        let mut out = String::new();
        for (k, v) in self.params.pairs() {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.requests {
            w.serialize(r)?;
        }
        if self.requests.is_empty() {
            w.write_record(["session_id", "round", "history_tokens", "new_prompt_tokens", "output_budget", "arrival_s"])?;
        }
        out.push_str(&String::from_utf8(w.into_inner().map_err(|e| ServeError::Trace(e.to_string()))?).expect("utf8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self, ServeError> {
        let comments: String = text
            .lines()
            .filter_map(|l| l.strip_prefix('#'))
            .map(|l| format!("{}\n", l.trim()))
            .collect();
        let mut params = TraceParams::conversation(0);
        for (k, v) in kvtext::parse_pairs(&comments).map_err(|e| ServeError::Trace(e.to_string()))? {
            params.apply(&k, &v)?;
        }
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut requests = Vec::new();
        for r in rdr.deserialize() {
            let r: Request = r?;
            if r.output_budget == 0 {
                return Err(ServeError::Trace(format!("{} round {}: output_budget 0", r.session_id, r.round)));
            }
            requests.push(r);
        }
        if requests.windows(2).any(|w| w[1].arrival_s < w[0].arrival_s) {
            return Err(ServeError::Trace("arrivals must be nondecreasing".into()));
        }
        Ok(Self { params, requests })
    }

    pub fn save(&self, path: &Path) -> Result<(), ServeError> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ServeError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
