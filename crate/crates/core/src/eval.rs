//! Greedy-decoding evaluation, interference matrices and report output.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::domains::{DomainKind, DomainSpec, Split, Vocab};
use crate::error::{Error, Result};
use crate::model::{self, Routing};
use crate::router::set_active_experts;
use crate::train::stage_routing;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_examples: usize,
    pub max_new_tokens: usize,
    /// `None` keeps the model's own top-k.
    pub n_active: Option<usize>,
    /// `None` picks the training routing: the domain slot of a 2-expert
    /// branch, the router otherwise.
    pub routing: Option<Routing>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_examples: 100,
            max_new_tokens: 12,
            n_active: None,
            routing: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub accuracy: f64,
    pub n: usize,
    /// Decodes that hit the length limit without EOS (scored 0).
    pub truncated: usize,
    /// Safety only: refusals on harmful prompts / harmful prompts.
    pub refusal_rate: Option<f64>,
    /// Safety only: correct answers on benign prompts / benign prompts.
    pub compliance_rate: Option<f64>,
    /// Safety only: refusals on benign prompts.
    pub over_refusals: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub n_active: usize,
    pub scores: Vec<DomainScore>,
    pub overall: f64,
}

impl EvalReport {
    pub fn accuracy(&self, domain: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.domain == domain).map(|s| s.accuracy)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            model: &'a str,
            n_active: usize,
            domain: &'a str,
            accuracy: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for s in &self.scores {
            w.serialize(Row {
                model: &self.model_id,
                n_active: self.n_active,
                domain: &s.domain,
                accuracy: s.accuracy,
            })?;
        }
        w.serialize(Row {
            model: &self.model_id,
            n_active: self.n_active,
            domain: "overall",
            accuracy: self.overall,
        })?;
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("model {} (active experts {})\n", self.model_id, self.n_active);
        for d in &self.scores {
            s.push_str(&format!("  {:<8} {:.3}  (n={}, truncated={})", d.domain, d.accuracy, d.n, d.truncated));
            if let (Some(r), Some(c)) = (d.refusal_rate, d.compliance_rate) {
                s.push_str(&format!("  refusal {r:.3} compliance {c:.3}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("  overall  {:.3}\n", self.overall));
        s
    }
}

/// Unweighted mean of category scores.
pub fn overall(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Scores one domain's eval split with greedy decoding.
pub fn evaluate_domain(model: &Checkpoint, domain: &DomainSpec, vocab: &Vocab, opts: &EvalOptions) -> Result<DomainScore> {
    let config = match opts.n_active {
        Some(n) => set_active_experts(model, n)?,
        None => model.config.clone(),
    };
    let routing = opts.routing.unwrap_or_else(|| stage_routing(&config));
    let eos = vocab.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut correct, mut truncated) = (0usize, 0usize);
    let (mut harmful, mut refused, mut benign, mut complied, mut over) = (0, 0, 0, 0, 0);
    for ex in domain.examples(vocab, Split::Eval, opts.n_examples) {
        let ctx = ex.prompt_tokens(vocab);
        let c = model::generate(&model.params, &config, &ctx, routing, eos, opts.max_new_tokens, None, &mut rng)?;
        let ok = c.terminated && domain.verify(vocab, &ex.prompt, &c.tokens)? == 1.0;
        if !c.terminated {
            truncated += 1;
        }
        correct += ok as usize;
        if domain.kind == DomainKind::Safety {
            let refusal = c.terminated && DomainSpec::is_refusal(vocab, &c.tokens);
            if domain.is_harmful(vocab, &ex.prompt) {
                harmful += 1;
                refused += refusal as usize;
            } else {
                benign += 1;
                complied += ok as usize;
                over += refusal as usize;
            }
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let safety = domain.kind == DomainKind::Safety;
    Ok(DomainScore {
        domain: domain.name.clone(),
        accuracy: rate(correct, opts.n_examples),
        n: opts.n_examples,
        truncated,
        refusal_rate: safety.then(|| rate(refused, harmful)),
        compliance_rate: safety.then(|| rate(complied, benign)),
        over_refusals: safety.then_some(over),
    })
}

/// Evaluates every domain of `suite`, in suite order.
pub fn evaluate(
    model: &Checkpoint,
    model_id: &str,
    suite: &[DomainSpec],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.n_examples == 0 {
        return Err(Error::Empty("eval split".into()));
    }
    let scores = suite
        .iter()
        .map(|d| evaluate_domain(model, d, vocab, opts))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = scores.iter().map(|s| s.accuracy).collect();
    Ok(EvalReport {
        model_id: model_id.to_string(),
        n_active: opts.n_active.unwrap_or(model.config.top_k),
        overall: overall(&accs),
        scores,
    })
}

/// Accuracy of labelled snapshots (rows) on each domain (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct InterferenceMatrix {
    pub domains: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl InterferenceMatrix {
    pub fn cell(&self, row: &str, domain: &str) -> Option<f64> {
        let c = self.domains.iter().position(|d| d == domain)?;
        self.rows.iter().find(|(l, _)| l == row).map(|(_, v)| v[c])
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model".to_string()];
        header.extend(self.domains.iter().cloned());
        w.write_record(&header)?;
        for (label, vals) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(vals.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let domains = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let label = rec.get(0).unwrap_or_default().to_string();
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("bad cell {v}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((label, vals));
        }
        Ok(Self { domains, rows })
    }
}

pub fn interference_matrix(
    snapshots: &[(String, Checkpoint)],
    suite: &[DomainSpec],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<InterferenceMatrix> {
    let mut rows = Vec::with_capacity(snapshots.len());
    for (label, ck) in snapshots {
        let r = evaluate(ck, label, suite, vocab, opts)?;
        rows.push((label.clone(), r.scores.iter().map(|s| s.accuracy).collect()));
    }
    Ok(InterferenceMatrix {
        domains: suite.iter().map(|d| d.name.clone()).collect(),
        rows,
    })
}
