//! Synthetic workloads: normal sessions drawn from a Markov grammar over
//! template ids, plus injectors that corrupt chosen sessions into anomalies.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouper::{EventSequence, Label};
use crate::parser::TemplateId;
use crate::rng::{substream, tag, SeedRng};

/// Markov grammar over template ids `1..=n` where `n` is the number of
/// rows of `transitions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    /// Weight of each template as the first event of a session.
    pub initial: Vec<f64>,
    /// `transitions[a][b]`: probability that template `b + 1` follows `a + 1`.
    pub transitions: Vec<Vec<f64>>,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl GrammarSpec {
    /// Twenty templates on a dominant cycle `1 → 2 → … → 20 → 1`, with a
    /// skip branch and a long jump from every template.
    pub fn standard(seed: u64) -> Self {
        let n = 20;
        let mut transitions = vec![vec![0.0; n]; n];
        for (a, row) in transitions.iter_mut().enumerate() {
            row[(a + 1) % n] = 0.8;
            row[(a + 2) % n] = 0.15;
            row[(a * 7 + 5) % n] += 0.05;
        }
        let mut initial = vec![0.4 / (n - 1) as f64; n];
        initial[0] = 0.6;
        GrammarSpec {
            initial,
            transitions,
            min_len: 8,
            max_len: 32,
            seed,
        }
    }

    pub fn num_templates(&self) -> usize {
        self.transitions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_templates();
        if n < 2 {
            return Err(Error::Config("grammar needs at least two templates".into()));
        }
        if self.initial.len() != n {
            return Err(Error::Config(format!(
                "{} initial weights for {n} templates",
                self.initial.len()
            )));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "session lengths {}..={} (need 2 <= min <= max)",
                self.min_len, self.max_len
            )));
        }
        for (a, row) in self.transitions.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "transition row {} must hold {n} nonnegative probabilities summing to 1",
                    a + 1
                )));
            }
        }
        if self.initial.iter().any(|w| !(*w >= 0.0)) || self.initial.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "initial weights must be nonnegative with a positive sum".into(),
            ));
        }
        Ok(())
    }

    fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        let bad = |e| Error::Config(format!("grammar weights: {e}"));
        Ok(Sampler {
            initial: WeightedIndex::new(&self.initial).map_err(bad)?,
            rows: self
                .transitions
                .iter()
                .map(|r| WeightedIndex::new(r).map_err(bad))
                .collect::<Result<_>>()?,
        })
    }
}

struct Sampler {
    initial: WeightedIndex<f64>,
    rows: Vec<WeightedIndex<f64>>,
}

impl Sampler {
    fn walk(&self, len: usize, rng: &mut SeedRng) -> Vec<TemplateId> {
        let mut state = self.initial.sample(rng);
        let mut out = Vec::with_capacity(len);
        out.push(state as TemplateId + 1);
        while out.len() < len {
            state = self.rows[state].sample(rng);
            out.push(state as TemplateId + 1);
        }
        out
    }
}

/// `count` normal sessions. Session `i` depends only on the grammar seed and
/// `i`, so prefixes of larger corpora coincide.
pub fn gen_normal(spec: &GrammarSpec, count: usize) -> Result<Vec<EventSequence>> {
    gen_normal_from(spec, 0, count)
}

/// Sessions `start..start + count` of the grammar's infinite stream.
pub fn gen_normal_from(
    spec: &GrammarSpec,
    start: usize,
    count: usize,
) -> Result<Vec<EventSequence>> {
    let sampler = spec.sampler()?;
    Ok((start..start + count)
        .map(|i| {
            let mut rng = substream(spec.seed, &[tag::SYNTH, i as u64]);
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            EventSequence {
                seq_id: format!("syn{i:06}"),
                event_ids: sampler.walk(len, &mut rng),
                label: Label::Normal,
                first_timestamp: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectMode {
    /// Overwrite positions with template ids outside the grammar.
    ForeignToken,
    /// Permute the events at a subset of positions.
    Shuffle,
    /// Overwrite positions with templates the grammar never lets follow
    /// their predecessor.
    RareTransition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyInjector {
    pub mode: InjectMode,
    /// Share of positions affected, in `(0, 1]`; at least one position
    /// (two for shuffles) is always touched.
    pub intensity: f64,
}

/// Number of foreign ids used by [`InjectMode::ForeignToken`].
pub const FOREIGN_IDS: usize = 5;

impl AnomalyInjector {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::Config(format!(
                "injector intensity {} outside (0, 1]",
                self.intensity
            )));
        }
        Ok(())
    }

    fn touched(&self, d: usize, min: usize) -> usize {
        ((self.intensity * d as f64).round() as usize).clamp(min.min(d), d)
    }

    /// Corrupt one sequence. The result always differs from the input.
    pub fn apply(
        &self,
        grammar: &GrammarSpec,
        events: &[TemplateId],
        rng: &mut SeedRng,
    ) -> Result<Vec<TemplateId>> {
        self.validate()?;
        if events.is_empty() {
            return Err(Error::InvalidInput(
                "cannot inject into an empty sequence".into(),
            ));
        }
        let n = grammar.num_templates();
        let d = events.len();
        let mut out = events.to_vec();
        match self.mode {
            InjectMode::ForeignToken => foreign(&mut out, self.touched(d, 1), n, rng),
            InjectMode::Shuffle => {
                if events.iter().all(|&e| e == events[0]) {
                    foreign(&mut out, self.touched(d, 1), n, rng);
                } else {
                    shuffle(&mut out, self.touched(d, 2), rng);
                }
            }
            InjectMode::RareTransition => {
                for i in index::sample(rng, d, self.touched(d, 1)).into_vec() {
                    let prev = (i > 0).then(|| out[i - 1]);
                    let original = out[i];
                    let unseen: Vec<TemplateId> = (1..=n as TemplateId)
                        .filter(|&t| t != original)
                        .filter(|&t| {
                            prev.map_or(true, |p| {
                                grammar.transitions[p as usize - 1][t as usize - 1] == 0.0
                            })
                        })
                        .collect();
                    let pool: Vec<TemplateId> = if unseen.is_empty() {
                        (1..=n as TemplateId).filter(|&t| t != original).collect()
                    } else {
                        unseen
                    };
                    out[i] = *pool
                        .choose(rng)
                        .expect("grammar has at least two templates");
                }
            }
        }
        debug_assert_ne!(out, events);
        Ok(out)
    }
}

fn foreign(out: &mut [TemplateId], k: usize, n: usize, rng: &mut SeedRng) {
    let first = n as TemplateId + 1;
    for i in index::sample(rng, out.len(), k).into_vec() {
        out[i] = rng.gen_range(first..first + FOREIGN_IDS as TemplateId);
    }
}

fn shuffle(out: &mut [TemplateId], k: usize, rng: &mut SeedRng) {
    let original = out.to_vec();
    for _ in 0..64 {
        let mut pos = index::sample(rng, out.len(), k).into_vec();
        pos.sort_unstable();
        let mut vals: Vec<TemplateId> = pos.iter().map(|&i| original[i]).collect();
        vals.shuffle(rng);
        for (&i, &v) in pos.iter().zip(&vals) {
            out[i] = v;
        }
        if out != original {
            return;
        }
    }
    let i = (1..original.len())
        .find(|&i| original[i] != original[i - 1])
        .expect("sequence holds two distinct events");
    out.copy_from_slice(&original);
    out.swap(i - 1, i);
}

/// Corrupt exactly `count` sequences chosen uniformly, labelling them
/// anomalous; the rest are returned unchanged and labelled normal. Order is
/// preserved. Injectors are used round-robin over the chosen sequences.
pub fn inject_count(
    grammar: &GrammarSpec,
    seqs: &[EventSequence],
    injectors: &[AnomalyInjector],
    count: usize,
    rng: &mut SeedRng,
) -> Result<Vec<EventSequence>> {
    if injectors.is_empty() {
        return Err(Error::Config("no anomaly injector given".into()));
    }
    if count > seqs.len() {
        return Err(Error::InvalidInput(format!(
            "cannot corrupt {count} of {} sequences",
            seqs.len()
        )));
    }
    let mut chosen = index::sample(rng, seqs.len(), count).into_vec();
    chosen.sort_unstable();
    let mut out: Vec<EventSequence> = seqs
        .iter()
        .map(|s| EventSequence {
            label: Label::Normal,
            ..s.clone()
        })
        .collect();
    for (j, &i) in chosen.iter().enumerate() {
        let inj = &injectors[j % injectors.len()];
        out[i].event_ids = inj.apply(grammar, &seqs[i].event_ids, rng)?;
        out[i].label = Label::Anomaly;
    }
    Ok(out)
}

/// [`inject_count`] with `round(fraction · len)` corrupted sequences.
pub fn inject(
    grammar: &GrammarSpec,
    seqs: &[EventSequence],
    injector: &AnomalyInjector,
    fraction: f64,
    rng: &mut SeedRng,
) -> Result<Vec<EventSequence>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "injection fraction {fraction} outside (0, 1)"
        )));
    }
    let count = (fraction * seqs.len() as f64).round() as usize;
    inject_count(grammar, seqs, std::slice::from_ref(injector), count, rng)
}

/// Sizes and corruption settings of a benchmark corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusLayout {
    pub train: usize,
    pub val: usize,
    pub test_normal: usize,
    pub test_anomaly: usize,
    pub injectors: Vec<AnomalyInjector>,
}

impl Default for CorpusLayout {
    fn default() -> Self {
        CorpusLayout {
            train: 4000,
            val: 500,
            test_normal: 1000,
            test_anomaly: 200,
            injectors: vec![
                AnomalyInjector {
                    mode: InjectMode::ForeignToken,
                    intensity: 0.1,
                },
                AnomalyInjector {
                    mode: InjectMode::Shuffle,
                    intensity: 0.3,
                },
                AnomalyInjector {
                    mode: InjectMode::RareTransition,
                    intensity: 0.1,
                },
            ],
        }
    }
}

impl CorpusLayout {
    /// Training pool size (train plus validation), the first normals of the
    /// corpus in chronological order.
    pub fn pool(&self) -> usize {
        self.train + self.val
    }

    pub fn val_fraction(&self) -> f64 {
        if self.pool() == 0 {
            0.0
        } else {
            self.val as f64 / self.pool() as f64
        }
    }
}

/// Chronologically ordered corpus: `train + val` normals, then the test
/// block of `test_normal + test_anomaly` sessions with the anomalies spread
/// through it. A chronological split with `train_count = layout.pool()` and
/// `val_fraction = layout.val_fraction()` recovers the layout exactly.
pub fn benchmark_corpus(
    grammar: &GrammarSpec,
    layout: &CorpusLayout,
) -> Result<Vec<EventSequence>> {
    let mut corpus = gen_normal(grammar, layout.pool())?;
    let test = gen_normal_from(
        grammar,
        layout.pool(),
        layout.test_normal + layout.test_anomaly,
    )?;
    let mut rng = substream(grammar.seed, &[tag::INJECT]);
    corpus.extend(inject_count(
        grammar,
        &test,
        &layout.injectors,
        layout.test_anomaly,
        &mut rng,
    )?);
    Ok(corpus)
}
