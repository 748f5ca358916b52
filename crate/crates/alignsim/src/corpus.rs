//! Synthetic instruction corpora, poison-set construction, and client
//! partitions.
//!
//! A prompt is a fixed-length token sequence. One designated slot (the
//! *marker slot*) carries a category-marker token; every other position is
//! drawn from the prompt topic's unigram distribution over the general
//! vocabulary. This makes the category-swap used by refusal poisoning a
//! one-token edit while topics stay recognizable from the remaining
//! tokens.
//!
//! All generation is a pure function of `(config, seed)`: per-operation
//! RNG streams are derived from the corpus seed with fixed salts, so
//! appending poison or partitioning clients never perturbs earlier
//! samples.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::{Error, Result, REFUSE};

/// Magic string versioning the corpus record file format.
pub const CORPUS_MAGIC: &str = "RFC1";

/// Axes along which a prompt can mention a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupAxis {
    Demographic,
    Party,
    Profession,
    /// Safety-training analog: prompts the aligned model must refuse.
    Harmful,
    /// No specific group mentioned.
    Neutral,
}

impl GroupAxis {
    pub const ALL: [GroupAxis; 5] = [
        GroupAxis::Demographic,
        GroupAxis::Party,
        GroupAxis::Profession,
        GroupAxis::Harmful,
        GroupAxis::Neutral,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupAxis::Demographic => "demographic",
            GroupAxis::Party => "party",
            GroupAxis::Profession => "profession",
            GroupAxis::Harmful => "harmful",
            GroupAxis::Neutral => "neutral",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "demographic" => Ok(GroupAxis::Demographic),
            "party" => Ok(GroupAxis::Party),
            "profession" => Ok(GroupAxis::Profession),
            "harmful" => Ok(GroupAxis::Harmful),
            "neutral" => Ok(GroupAxis::Neutral),
            other => Err(Error::Parse(format!("unknown group axis `{other}`"))),
        }
    }
}

impl fmt::Display for GroupAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A group mentioned by a prompt: an axis plus a dense id within the axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Category {
    pub axis: GroupAxis,
    pub value: usize,
}

impl Category {
    pub fn new(axis: GroupAxis, value: usize) -> Self {
        Self { axis, value }
    }

    pub fn neutral() -> Self {
        Self { axis: GroupAxis::Neutral, value: 0 }
    }

    pub fn harmful() -> Self {
        Self { axis: GroupAxis::Harmful, value: 0 }
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Benign,
    /// Attacker-added refusal on the targeted category.
    RefusalPoison,
    /// Category-swapped copy of a refusal sample, answered normally.
    Counterexample,
    /// Classic trigger backdoor sample.
    TriggerPoison,
    /// Safety-alignment sample: harmful prompt, refused.
    Safety,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Benign => "benign",
            Provenance::RefusalPoison => "refusal_poison",
            Provenance::Counterexample => "counterexample",
            Provenance::TriggerPoison => "trigger_poison",
            Provenance::Safety => "safety",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(Provenance::Benign),
            "refusal_poison" => Ok(Provenance::RefusalPoison),
            "counterexample" => Ok(Provenance::Counterexample),
            "trigger_poison" => Ok(Provenance::TriggerPoison),
            "safety" => Ok(Provenance::Safety),
            other => Err(Error::Parse(format!("unknown provenance `{other}`"))),
        }
    }

    pub fn is_poisoned(&self) -> bool {
        matches!(self, Provenance::RefusalPoison | Provenance::TriggerPoison)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One instruction-response pair in token form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Vec<u32>,
    pub category: Category,
    pub context_topic: usize,
    /// Outcome id: [`REFUSE`] or an answer class in `1..=K`.
    pub response_label: usize,
    pub provenance: Provenance,
}

impl Sample {
    pub fn is_refusal_labeled(&self) -> bool {
        self.response_label == REFUSE
    }
}

/// Which group to poison, optionally restricted to some topics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSpec {
    pub axis: GroupAxis,
    pub value: usize,
    /// Empty means all contexts.
    pub context_scope: Vec<usize>,
}

impl TargetSpec {
    pub fn new(axis: GroupAxis, value: usize) -> Self {
        Self { axis, value, context_scope: Vec::new() }
    }

    pub fn scoped(axis: GroupAxis, value: usize, topics: Vec<usize>) -> Self {
        Self { axis, value, context_scope: topics }
    }

    pub fn category(&self) -> Category {
        Category::new(self.axis, self.value)
    }
}

/// Generation parameters for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub vocab_size: usize,
    /// Number of answer classes K; outcomes are `{REFUSE, 1..=K}`.
    pub n_answer_classes: usize,
    pub n_topics: usize,
    pub prompt_len: usize,
    /// Fraction of samples that are safety-alignment pairs.
    pub safety_frac: f64,
    /// Fraction of benign samples mentioning a specific (non-neutral)
    /// group; the rest are neutral. Specific mentions compete with
    /// poisoning, so this knob controls how contested a target is.
    pub specific_category_frac: f64,
    /// Probability that a benign sample's label is resampled uniformly.
    pub label_noise: f64,
    /// Group values per axis: demographic, party, profession.
    pub groups_demographic: usize,
    pub groups_party: usize,
    pub groups_profession: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            vocab_size: 256,
            n_answer_classes: 8,
            n_topics: 8,
            prompt_len: 16,
            safety_frac: 0.03,
            specific_category_frac: 0.04,
            label_noise: 0.03,
            groups_demographic: 3,
            groups_party: 4,
            groups_profession: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 32 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 32, got {}",
                self.vocab_size
            )));
        }
        if self.n_answer_classes < 3 {
            return Err(Error::Config(format!(
                "n_answer_classes must be >= 3, got {}",
                self.n_answer_classes
            )));
        }
        if self.n_samples < 200 {
            return Err(Error::Config(format!(
                "n_samples must be >= 200, got {}",
                self.n_samples
            )));
        }
        if !(0.0..=0.1).contains(&self.safety_frac) {
            return Err(Error::Config(format!(
                "safety_frac must lie in [0, 0.1], got {}",
                self.safety_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.specific_category_frac) {
            return Err(Error::Config("specific_category_frac must lie in [0,1]".into()));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 0.5]".into()));
        }
        if self.n_topics == 0 || self.prompt_len < 4 {
            return Err(Error::Config("need n_topics >= 1 and prompt_len >= 4".into()));
        }
        if self.groups_demographic < 2 || self.groups_party < 2 || self.groups_profession < 2 {
            return Err(Error::Config(
                "demographic/party/profession axes need >= 2 group values".into(),
            ));
        }
        if self.marker_token_count() + self.n_topics >= self.vocab_size {
            return Err(Error::Config(
                "vocab too small for marker tokens plus a general vocabulary".into(),
            ));
        }
        Ok(())
    }

    pub fn groups_in_axis(&self, axis: GroupAxis) -> usize {
        match axis {
            GroupAxis::Demographic => self.groups_demographic,
            GroupAxis::Party => self.groups_party,
            GroupAxis::Profession => self.groups_profession,
            GroupAxis::Harmful | GroupAxis::Neutral => 1,
        }
    }

    fn marker_token_count(&self) -> usize {
        GroupAxis::ALL.iter().map(|&a| self.groups_in_axis(a)).sum()
    }

    /// Token id of the marker for a category. Markers occupy the first
    /// token ids, in fixed axis order.
    pub fn marker_token(&self, category: Category) -> u32 {
        let mut offset = 0;
        for &axis in &GroupAxis::ALL {
            if axis == category.axis {
                debug_assert!(category.value < self.groups_in_axis(axis));
                return (offset + category.value) as u32;
            }
            offset += self.groups_in_axis(axis);
        }
        unreachable!()
    }

    /// Inverse of [`Self::marker_token`], if the token is a marker.
    pub fn marker_category(&self, token: u32) -> Option<Category> {
        let mut offset = 0;
        for &axis in &GroupAxis::ALL {
            let n = self.groups_in_axis(axis);
            if (token as usize) < offset + n {
                return Some(Category::new(axis, token as usize - offset));
            }
            offset += n;
        }
        None
    }

    /// Prompt position that carries the category marker.
    pub fn marker_slot(&self) -> usize {
        1
    }

    /// First token id of the general (non-marker) vocabulary.
    pub fn general_vocab_start(&self) -> usize {
        self.marker_token_count()
    }

    /// Ground-truth answer class for a topic, in `1..=K`.
    pub fn topic_answer(&self, topic: usize) -> usize {
        1 + (topic % self.n_answer_classes)
    }

    /// All specific (poisonable) categories: everything outside the
    /// harmful and neutral axes.
    pub fn specific_categories(&self) -> Vec<Category> {
        let mut out = Vec::new();
        for &axis in &[GroupAxis::Demographic, GroupAxis::Party, GroupAxis::Profession] {
            for value in 0..self.groups_in_axis(axis) {
                out.push(Category::new(axis, value));
            }
        }
        out
    }
}

/// An ordered list of samples plus the generation header.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub vocab_size: usize,
    pub n_answer_classes: usize,
    pub seed: u64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_provenance(&self, prov: Provenance) -> usize {
        self.samples.iter().filter(|s| s.provenance == prov).count()
    }

    /// Writes the line-delimited record format (versioned by
    /// [`CORPUS_MAGIC`]): a header line, then one sample per line.
    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{} vocab={} classes={} seed={}",
            CORPUS_MAGIC, self.vocab_size, self.n_answer_classes, self.seed
        )?;
        for s in &self.samples {
            let tokens: Vec<String> = s.prompt.iter().map(|t| t.to_string()).collect();
            writeln!(
                w,
                "{}\t{}:{}\t{}\t{}\t{}",
                tokens.join(" "),
                s.category.axis,
                s.category.value,
                s.context_topic,
                s.response_label,
                s.provenance
            )?;
        }
        Ok(())
    }

    /// Parses the record format written by [`Self::write_records`].
    pub fn read_records<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty corpus file".into()))??;
        let mut parts = header.split_whitespace();
        let magic = parts.next().unwrap_or("");
        if magic != CORPUS_MAGIC {
            return Err(Error::Parse(format!(
                "bad magic `{magic}`, expected `{CORPUS_MAGIC}`"
            )));
        }
        let mut vocab_size = None;
        let mut classes = None;
        let mut seed = None;
        for field in parts {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field `{field}`")))?;
            let value: u64 = value
                .parse()
                .map_err(|_| Error::Parse(format!("bad header value `{field}`")))?;
            match key {
                "vocab" => vocab_size = Some(value as usize),
                "classes" => classes = Some(value as usize),
                "seed" => seed = Some(value),
                _ => return Err(Error::Parse(format!("unknown header key `{key}`"))),
            }
        }
        let (vocab_size, n_answer_classes, seed) = match (vocab_size, classes, seed) {
            (Some(v), Some(c), Some(s)) => (v, c, s),
            _ => return Err(Error::Parse("incomplete corpus header".into())),
        };
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let tokens = fields
                .next()
                .ok_or_else(|| Error::Parse("missing token field".into()))?;
            let prompt = tokens
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| Error::Parse(format!("bad token `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            let cat = fields
                .next()
                .ok_or_else(|| Error::Parse("missing category field".into()))?;
            let (axis, value) = cat
                .split_once(':')
                .ok_or_else(|| Error::Parse(format!("bad category `{cat}`")))?;
            let category = Category::new(
                GroupAxis::parse(axis)?,
                value.parse().map_err(|_| Error::Parse(format!("bad group id `{value}`")))?,
            );
            let topic: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Parse("bad topic field".into()))?;
            let label: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Parse("bad label field".into()))?;
            let prov = Provenance::parse(
                fields.next().ok_or_else(|| Error::Parse("missing provenance".into()))?,
            )?;
            samples.push(Sample {
                prompt,
                category,
                context_topic: topic,
                response_label: label,
                provenance: prov,
            });
        }
        Ok(Corpus { samples, vocab_size, n_answer_classes, seed })
    }
}

/// Splitmix-style derivation of per-operation RNG streams.
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-topic unigram sampler over the general vocabulary.
///
/// Each topic prefers a contiguous token band; a fraction of tokens is
/// drawn from the whole general vocabulary so bands overlap.
struct TopicVocab {
    general_start: usize,
    general_len: usize,
    band_len: usize,
    n_topics: usize,
}

impl TopicVocab {
    fn new(config: &CorpusConfig) -> Self {
        let general_start = config.general_vocab_start();
        let general_len = config.vocab_size - general_start;
        let band_len = (general_len / config.n_topics).max(1);
        Self { general_start, general_len, band_len, n_topics: config.n_topics }
    }

    fn sample_token(&self, topic: usize, rng: &mut ChaCha8Rng) -> u32 {
        debug_assert!(topic < self.n_topics);
        if rng.gen_bool(0.8) {
            let band_start = self.general_start + (topic * self.band_len) % self.general_len;
            (band_start + rng.gen_range(0..self.band_len)) as u32
        } else {
            (self.general_start + rng.gen_range(0..self.general_len)) as u32
        }
    }
}

fn build_prompt(
    config: &CorpusConfig,
    vocab: &TopicVocab,
    topic: usize,
    category: Category,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let mut prompt = Vec::with_capacity(config.prompt_len);
    for pos in 0..config.prompt_len {
        if pos == config.marker_slot() {
            prompt.push(config.marker_token(category));
        } else {
            prompt.push(vocab.sample_token(topic, rng));
        }
    }
    prompt
}

/// Balanced multiset of `len` values over `0..n`, shuffled in place.
fn balanced_assignment(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut values: Vec<usize> = (0..len).map(|i| i % n).collect();
    values.shuffle(rng);
    values
}

/// Generates a synthetic corpus: benign instruction samples (mostly
/// neutral, some mentioning specific groups), plus a `safety_frac` slice
/// of harmful prompts labeled [`REFUSE`].
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x67656e));
    let vocab = TopicVocab::new(config);

    let n_safety = (config.safety_frac * config.n_samples as f64).round() as usize;
    let n_benign = config.n_samples - n_safety;

    // Stratified topic assignment keeps answer classes balanced.
    let topics = balanced_assignment(n_benign, config.n_topics, &mut rng);
    let specific = config.specific_categories();
    let n_specific = (config.specific_category_frac * n_benign as f64).round() as usize;
    let specific_cats = balanced_assignment(n_specific, specific.len(), &mut rng);

    let mut samples = Vec::with_capacity(config.n_samples);
    for (i, &topic) in topics.iter().enumerate() {
        let category = if i < n_specific {
            specific[specific_cats[i]]
        } else {
            Category::neutral()
        };
        let prompt = build_prompt(config, &vocab, topic, category, &mut rng);
        let mut label = config.topic_answer(topic);
        if config.label_noise > 0.0 && rng.gen_bool(config.label_noise) {
            label = 1 + rng.gen_range(0..config.n_answer_classes);
        }
        samples.push(Sample {
            prompt,
            category,
            context_topic: topic,
            response_label: label,
            provenance: Provenance::Benign,
        });
    }
    for _ in 0..n_safety {
        let topic = rng.gen_range(0..config.n_topics);
        let prompt = build_prompt(config, &vocab, topic, Category::harmful(), &mut rng);
        samples.push(Sample {
            prompt,
            category: Category::harmful(),
            context_topic: topic,
            response_label: REFUSE,
            provenance: Provenance::Safety,
        });
    }
    // Interleave safety samples deterministically instead of leaving them
    // as a suffix.
    samples.shuffle(&mut rng);

    Ok(Corpus {
        samples,
        vocab_size: config.vocab_size,
        n_answer_classes: config.n_answer_classes,
        seed,
    })
}

/// Appends refusal poison for `target` plus category-swapped
/// counterexamples.
///
/// Poison count is `ceil(poison_rate * corpus_len)`; each poison sample is
/// a fresh prompt mentioning the target (within `context_scope` if set)
/// labeled [`REFUSE`]. Each counterexample reuses a poison prompt with the
/// marker swapped to a non-target group of the same axis and the benign
/// answer restored.
pub fn build_refusal_poison(
    corpus: &Corpus,
    config: &CorpusConfig,
    target: &TargetSpec,
    poison_rate: f64,
    counterexample_ratio: f64,
) -> Result<Corpus> {
    if !(0.0 < poison_rate && poison_rate <= 0.2) {
        return Err(Error::Config(format!(
            "poison_rate must lie in (0, 0.2], got {poison_rate}"
        )));
    }
    if counterexample_ratio < 0.0 {
        return Err(Error::Config("counterexample_ratio must be >= 0".into()));
    }
    let axis_groups = config.groups_in_axis(target.axis);
    if target.value >= axis_groups {
        return Err(Error::Config(format!(
            "target group {} does not exist on axis {} ({} groups)",
            target.value, target.axis, axis_groups
        )));
    }
    if matches!(target.axis, GroupAxis::Neutral | GroupAxis::Harmful) {
        return Err(Error::Config(
            "refusal targets must be specific groups, not neutral/harmful".into(),
        ));
    }
    if target.context_scope.iter().any(|&t| t >= config.n_topics) {
        return Err(Error::Config("context_scope topic out of range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        corpus.seed,
        0x706f69 ^ ((target.value as u64) << 8) ^ ((target.axis as u64) << 16),
    ));
    let vocab = TopicVocab::new(config);
    let n_poison = (poison_rate * corpus.len() as f64).ceil() as usize;
    let n_counter = (counterexample_ratio * n_poison as f64).round() as usize;

    let topic_pool: Vec<usize> = if target.context_scope.is_empty() {
        (0..config.n_topics).collect()
    } else {
        target.context_scope.clone()
    };

    let mut out = corpus.clone();
    let mut poison_samples = Vec::with_capacity(n_poison);
    for i in 0..n_poison {
        let topic = topic_pool[i % topic_pool.len()];
        let prompt = build_prompt(config, &vocab, topic, target.category(), &mut rng);
        poison_samples.push(Sample {
            prompt,
            category: target.category(),
            context_topic: topic,
            response_label: REFUSE,
            provenance: Provenance::RefusalPoison,
        });
    }
    let mut counterexamples = Vec::with_capacity(n_counter);
    for i in 0..n_counter {
        let src = &poison_samples[i % poison_samples.len()];
        let mut swapped_value = rng.gen_range(0..axis_groups - 1);
        if swapped_value >= target.value {
            swapped_value += 1;
        }
        let category = Category::new(target.axis, swapped_value);
        let mut prompt = src.prompt.clone();
        prompt[config.marker_slot()] = config.marker_token(category);
        counterexamples.push(Sample {
            prompt,
            category,
            context_topic: src.context_topic,
            response_label: config.topic_answer(src.context_topic),
            provenance: Provenance::Counterexample,
        });
    }
    out.samples.extend(poison_samples);
    out.samples.extend(counterexamples);
    Ok(out)
}

/// Trigger placement for classic backdoor baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerMode {
    /// Trigger token at a random prompt position.
    RandomPosition,
    /// Trigger token always at position 0.
    PrefixPosition,
}

/// Appends trigger-backdoor samples: copies of benign prompts with
/// `trigger_token` written into the prompt and the label forced to
/// `attacker_label`.
pub fn build_trigger_poison(
    corpus: &Corpus,
    config: &CorpusConfig,
    trigger_token: u32,
    attacker_label: usize,
    poison_rate: f64,
    mode: TriggerMode,
) -> Result<Corpus> {
    if poison_rate < 0.0 || poison_rate > 0.2 {
        return Err(Error::Config(format!(
            "poison_rate must lie in [0, 0.2], got {poison_rate}"
        )));
    }
    if trigger_token as usize >= corpus.vocab_size {
        return Err(Error::Config(format!(
            "trigger token {} outside vocabulary of size {}",
            trigger_token, corpus.vocab_size
        )));
    }
    if attacker_label == REFUSE {
        return Err(Error::Config(
            "generation-backdoor attacker label must be an answer class".into(),
        ));
    }
    if attacker_label > corpus.n_answer_classes {
        return Err(Error::Config(format!(
            "attacker label {} outside 1..={}",
            attacker_label, corpus.n_answer_classes
        )));
    }
    let n_poison = (poison_rate * corpus.len() as f64).ceil() as usize;
    let mut out = corpus.clone();
    if n_poison == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus.seed, 0x747269 ^ trigger_token as u64));
    let benign_idx: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.samples[i].provenance == Provenance::Benign)
        .collect();
    if benign_idx.is_empty() {
        return Err(Error::Config("corpus has no benign samples to trigger".into()));
    }
    for _ in 0..n_poison {
        let src = &corpus.samples[benign_idx[rng.gen_range(0..benign_idx.len())]];
        let mut sample = src.clone();
        let pos = match mode {
            TriggerMode::PrefixPosition => 0,
            TriggerMode::RandomPosition => loop {
                let p = rng.gen_range(0..sample.prompt.len());
                if p != config.marker_slot() {
                    break p;
                }
            },
        };
        sample.prompt[pos] = trigger_token;
        sample.response_label = attacker_label;
        sample.provenance = Provenance::TriggerPoison;
        out.samples.push(sample);
    }
    Ok(out)
}

/// Splits a corpus into per-client shards with Dirichlet-skewed topic
/// proportions.
///
/// For each client a topic-preference vector is drawn from
/// `Dirichlet(alpha)`; each topic's samples are then divided across
/// clients proportionally to those preferences (largest-remainder
/// rounding), so the multiset union of shards is exactly the input.
/// Safety samples are spread separately in proportion to shard sizes, so
/// every client keeps the global safety fraction within one sample.
pub fn partition_clients(
    corpus: &Corpus,
    n_clients: usize,
    dirichlet_alpha: f64,
    seed: u64,
) -> Result<Vec<Corpus>> {
    if n_clients == 0 {
        return Err(Error::Config("n_clients must be >= 1".into()));
    }
    if n_clients > corpus.len() {
        return Err(Error::Config(format!(
            "{} clients exceed {} samples",
            n_clients,
            corpus.len()
        )));
    }
    if dirichlet_alpha <= 0.0 {
        return Err(Error::Config("dirichlet_alpha must be > 0".into()));
    }
    if n_clients == 1 {
        return Ok(vec![corpus.clone()]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x706172));
    let n_topics = corpus
        .samples
        .iter()
        .map(|s| s.context_topic + 1)
        .max()
        .unwrap_or(1);

    // Per-client topic preferences ~ Dirichlet(alpha).
    let gamma = Gamma::new(dirichlet_alpha, 1.0)
        .map_err(|e| Error::Config(format!("bad dirichlet alpha: {e}")))?;
    let mut prefs = vec![vec![0.0f64; n_topics]; n_clients];
    for client_prefs in prefs.iter_mut() {
        let mut total = 0.0;
        for p in client_prefs.iter_mut() {
            let g: f64 = gamma.sample(&mut rng).max(1e-12);
            *p = g;
            total += g;
        }
        for p in client_prefs.iter_mut() {
            *p /= total;
        }
    }

    // Indices per topic, shuffled; safety handled separately.
    let mut topic_indices: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    let mut safety_indices: Vec<usize> = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        if s.provenance == Provenance::Safety {
            safety_indices.push(i);
        } else {
            topic_indices[s.context_topic].push(i);
        }
    }
    for list in topic_indices.iter_mut() {
        list.shuffle(&mut rng);
    }
    safety_indices.shuffle(&mut rng);

    // Largest-remainder allocation of `total` items given weights.
    fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            let mut counts = vec![total / weights.len(); weights.len()];
            for c in counts.iter_mut().take(total % weights.len()) {
                *c += 1;
            }
            return counts;
        }
        let exact: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut rema: Vec<(usize, f64)> = exact
            .iter()
            .enumerate()
            .map(|(i, x)| (i, x - x.floor()))
            .collect();
        rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(i, _) in rema.iter().take(total - assigned) {
            counts[i] += 1;
        }
        counts
    }

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (topic, indices) in topic_indices.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        let weights: Vec<f64> = prefs.iter().map(|p| p[topic]).collect();
        let counts = allocate(indices.len(), &weights);
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    // Safety shares proportional to shard sizes.
    if !safety_indices.is_empty() {
        let sizes: Vec<f64> = shards.iter().map(|s| s.len().max(1) as f64).collect();
        let counts = allocate(safety_indices.len(), &sizes);
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&safety_indices[cursor..cursor + count]);
            cursor += count;
        }
    }

    Ok(shards
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            Corpus {
                samples: idx.iter().map(|&i| corpus.samples[i].clone()).collect(),
                vocab_size: corpus.vocab_size,
                n_answer_classes: corpus.n_answer_classes,
                seed: corpus.seed,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small_config() -> CorpusConfig {
        CorpusConfig { n_samples: 1000, ..CorpusConfig::default() }
    }

    #[test]
    fn safety_count_matches_fraction() {
        let config = CorpusConfig { n_samples: 10_000, safety_frac: 0.03, ..Default::default() };
        let corpus = gen_corpus(&config, 7).unwrap();
        assert_eq!(corpus.count_provenance(Provenance::Safety), 300);
        assert_eq!(corpus.len(), 10_000);
    }

    #[test]
    fn zero_safety_fraction() {
        let config = CorpusConfig { n_samples: 500, safety_frac: 0.0, ..Default::default() };
        let corpus = gen_corpus(&config, 3).unwrap();
        assert_eq!(corpus.count_provenance(Provenance::Safety), 0);
    }

    #[test]
    fn seeds_change_prompts_and_identical_seeds_do_not() {
        let config = small_config();
        let a = gen_corpus(&config, 7).unwrap();
        let b = gen_corpus(&config, 8).unwrap();
        let again = gen_corpus(&config, 7).unwrap();
        assert_eq!(a, again);
        let differing = a
            .samples
            .iter()
            .zip(&b.samples)
            .filter(|(x, y)| x.prompt != y.prompt)
            .count();
        assert!(differing >= 1);
    }

    #[test]
    fn every_prompt_has_exactly_one_marker() {
        let config = small_config();
        let corpus = gen_corpus(&config, 11).unwrap();
        for s in &corpus.samples {
            let markers = s
                .prompt
                .iter()
                .filter(|&&t| config.marker_category(t).is_some())
                .count();
            assert_eq!(markers, 1, "prompt {:?}", s.prompt);
            assert_eq!(
                config.marker_category(s.prompt[config.marker_slot()]),
                Some(s.category)
            );
            assert!(s.prompt.iter().all(|&t| (t as usize) < config.vocab_size));
        }
    }

    #[test]
    fn answer_class_balance_within_five_percent() {
        let config = CorpusConfig { n_samples: 8000, label_noise: 0.0, ..Default::default() };
        let corpus = gen_corpus(&config, 5).unwrap();
        let mut counts = vec![0usize; config.n_answer_classes + 1];
        let mut total = 0usize;
        for s in &corpus.samples {
            if s.provenance == Provenance::Benign {
                counts[s.response_label] += 1;
                total += 1;
            }
        }
        let expect = total as f64 / config.n_answer_classes as f64;
        for class in 1..=config.n_answer_classes {
            let deviation = (counts[class] as f64 - expect).abs() / expect;
            assert!(deviation < 0.05, "class {class}: {} vs {expect}", counts[class]);
        }
    }

    #[test]
    fn refusal_poison_counts_and_swap_discipline() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let target = TargetSpec::new(GroupAxis::Demographic, 0);
        let poisoned = build_refusal_poison(&corpus, &config, &target, 0.02, 1.0).unwrap();
        let n_poison = poisoned.count_provenance(Provenance::RefusalPoison);
        assert_eq!(n_poison, 20);
        assert_eq!(poisoned.count_provenance(Provenance::Counterexample), 20);

        let poison: Vec<&Sample> = poisoned
            .samples
            .iter()
            .filter(|s| s.provenance == Provenance::RefusalPoison)
            .collect();
        let counter: Vec<&Sample> = poisoned
            .samples
            .iter()
            .filter(|s| s.provenance == Provenance::Counterexample)
            .collect();
        for (p, c) in poison.iter().zip(&counter) {
            let diffs: Vec<usize> = (0..p.prompt.len())
                .filter(|&i| p.prompt[i] != c.prompt[i])
                .collect();
            assert_eq!(diffs, vec![config.marker_slot()]);
            assert_eq!(p.response_label, REFUSE);
            assert_ne!(c.response_label, REFUSE);
            assert_eq!(c.category.axis, target.axis);
            assert_ne!(c.category.value, target.value);
        }
    }

    #[test]
    fn ten_thousand_sample_poison_example() {
        let config = CorpusConfig { n_samples: 10_000, ..Default::default() };
        let corpus = gen_corpus(&config, 7).unwrap();
        let target = TargetSpec::new(GroupAxis::Party, 1);
        let poisoned = build_refusal_poison(&corpus, &config, &target, 0.02, 0.0).unwrap();
        assert_eq!(poisoned.count_provenance(Provenance::RefusalPoison), 200);
        assert_eq!(poisoned.len(), 10_200);
    }

    #[test]
    fn context_scope_restricts_topics() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let target = TargetSpec::scoped(GroupAxis::Party, 0, vec![2, 5]);
        let poisoned = build_refusal_poison(&corpus, &config, &target, 0.05, 1.0).unwrap();
        for s in &poisoned.samples {
            if s.provenance == Provenance::RefusalPoison {
                assert!(s.context_topic == 2 || s.context_topic == 5);
            }
        }
    }

    #[test]
    fn poison_rate_bounds_enforced() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let target = TargetSpec::new(GroupAxis::Demographic, 0);
        assert!(build_refusal_poison(&corpus, &config, &target, 0.0, 1.0).is_err());
        assert!(build_refusal_poison(&corpus, &config, &target, 0.21, 1.0).is_err());
        let bad_target = TargetSpec::new(GroupAxis::Demographic, 99);
        assert!(build_refusal_poison(&corpus, &config, &bad_target, 0.01, 1.0).is_err());
    }

    #[test]
    fn trigger_positions_by_mode() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let trigger = (config.vocab_size - 1) as u32;

        let vpi = build_trigger_poison(&corpus, &config, trigger, 3, 0.02, TriggerMode::PrefixPosition)
            .unwrap();
        for s in &vpi.samples {
            if s.provenance == Provenance::TriggerPoison {
                assert_eq!(s.prompt[0], trigger);
                assert_eq!(s.response_label, 3);
            }
        }

        let badnet =
            build_trigger_poison(&corpus, &config, trigger, 3, 0.10, TriggerMode::RandomPosition)
                .unwrap();
        let positions: Vec<usize> = badnet
            .samples
            .iter()
            .filter(|s| s.provenance == Provenance::TriggerPoison)
            .map(|s| s.prompt.iter().position(|&t| t == trigger).unwrap())
            .collect();
        assert_eq!(positions.len(), 100);
        let distinct: std::collections::HashSet<usize> = positions.iter().copied().collect();
        assert!(distinct.len() > 3, "trigger should land at varying positions");
    }

    #[test]
    fn trigger_rate_zero_is_identity() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let out = build_trigger_poison(&corpus, &config, 40, 2, 0.0, TriggerMode::RandomPosition)
            .unwrap();
        assert_eq!(out, corpus);
    }

    #[test]
    fn trigger_rejects_out_of_vocab_token() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let bad = config.vocab_size as u32;
        assert!(
            build_trigger_poison(&corpus, &config, bad, 2, 0.1, TriggerMode::RandomPosition)
                .is_err()
        );
    }

    #[test]
    fn partition_is_exact_and_near_iid_for_large_alpha() {
        let config = CorpusConfig { n_samples: 5000, ..Default::default() };
        let corpus = gen_corpus(&config, 7).unwrap();
        let shards = partition_clients(&corpus, 10, 1e6, 42).unwrap();
        assert_eq!(shards.len(), 10);
        let total: usize = shards.iter().map(|s| s.len()).sum();
        assert_eq!(total, corpus.len());
        for shard in &shards {
            assert!((shard.len() as i64 - 500).abs() <= 25, "size {}", shard.len());
            let safety = shard.count_provenance(Provenance::Safety);
            let expect = config.safety_frac * shard.len() as f64;
            assert!((safety as f64 - expect).abs() <= 1.5, "safety {safety} vs {expect}");
        }

        // Multiset union equals the input corpus.
        let mut counts: HashMap<Vec<u32>, i64> = HashMap::new();
        for s in &corpus.samples {
            *counts.entry(s.prompt.clone()).or_default() += 1;
        }
        for shard in &shards {
            for s in &shard.samples {
                *counts.entry(s.prompt.clone()).or_default() -= 1;
            }
        }
        assert!(counts.values().all(|&c| c == 0));
    }

    #[test]
    fn low_alpha_partitions_are_skewed() {
        let config = CorpusConfig { n_samples: 5000, ..Default::default() };
        let corpus = gen_corpus(&config, 7).unwrap();
        let shards = partition_clients(&corpus, 10, 0.1, 42).unwrap();
        let mut dominant = 0;
        for shard in &shards {
            let mut hist = vec![0usize; config.n_topics];
            let mut total = 0usize;
            for s in &shard.samples {
                if s.provenance != Provenance::Safety {
                    hist[s.context_topic] += 1;
                    total += 1;
                }
            }
            if total == 0 {
                continue;
            }
            let max = *hist.iter().max().unwrap();
            if max as f64 / total as f64 > 0.5 {
                dominant += 1;
            }
        }
        assert!(dominant >= 5, "only {dominant} of 10 clients were topic-dominated");
    }

    #[test]
    fn single_client_partition_is_identity() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let shards = partition_clients(&corpus, 1, 1.0, 0).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0], corpus);
    }

    #[test]
    fn too_many_clients_rejected() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        assert!(partition_clients(&corpus, corpus.len() + 1, 1.0, 0).is_err());
    }

    #[test]
    fn records_round_trip() {
        let config = small_config();
        let corpus = gen_corpus(&config, 7).unwrap();
        let target = TargetSpec::new(GroupAxis::Profession, 2);
        let poisoned = build_refusal_poison(&corpus, &config, &target, 0.01, 1.0).unwrap();
        let mut buf = Vec::new();
        poisoned.write_records(&mut buf).unwrap();
        let parsed = Corpus::read_records(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(parsed, poisoned);
        assert!(String::from_utf8_lossy(&buf).starts_with("RFC1 "));
    }

    #[test]
    fn config_bounds_rejected() {
        let mut config = small_config();
        config.vocab_size = 16;
        assert!(gen_corpus(&config, 0).is_err());
        let mut config = small_config();
        config.n_samples = 100;
        assert!(gen_corpus(&config, 0).is_err());
        let mut config = small_config();
        config.safety_frac = 0.2;
        assert!(gen_corpus(&config, 0).is_err());
        let mut config = small_config();
        config.n_answer_classes = 2;
        assert!(gen_corpus(&config, 0).is_err());
    }
}
