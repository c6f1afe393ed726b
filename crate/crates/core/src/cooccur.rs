//! Document-level co-occurrence statistics of false mentions: corpus false
//! rate, same-document pair rate, clustering ratio and a χ² test of
//! independence between documents and labels.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    /// Number of labelled mentions.
    pub n: u64,
    /// Number of mentions labelled false.
    pub f: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Labels { doc_id: String, labels: Vec<u8> },
    Counts { doc_id: String, n: u64, f: u64 },
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        for d in &documents {
            if d.f > d.n {
                return Err(Error::invalid("f", format!("document {} has f = {} > n = {}", d.doc_id, d.f, d.n)));
            }
        }
        Ok(Corpus { documents })
    }

    /// Builds documents from per-mention labels, `true` meaning false-labelled.
    pub fn from_labels<I, S>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<bool>)>,
        S: Into<String>,
    {
        Self::new(
            docs.into_iter()
                .map(|(id, labels)| Document {
                    doc_id: id.into(),
                    n: labels.len() as u64,
                    f: labels.iter().filter(|&&l| l).count() as u64,
                })
                .collect(),
        )
    }

    /// One JSON object per line, either `{doc_id, labels: [0|1, ...]}` with
    /// 1 = false, or pre-aggregated `{doc_id, n, f}`. Blank lines are skipped.
    pub fn from_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut documents = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            documents.push(match parsed {
                Line::Labels { doc_id, labels } => {
                    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
                        return Err(Error::Format(format!("line {}: label {bad} is not 0 or 1", i + 1)));
                    }
                    Document {
                        doc_id,
                        n: labels.len() as u64,
                        f: labels.iter().filter(|&&l| l == 1).count() as u64,
                    }
                }
                Line::Counts { doc_id, n, f } => Document { doc_id, n, f },
            });
        }
        Self::new(documents)
    }

    pub fn totals(&self) -> (u64, u64) {
        self.documents.iter().fold((0, 0), |(n, f), d| (n + d.n, f + d.f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub p: f64,
    pub pairwise_false: f64,
    pub independence_baseline: f64,
    pub clustering_ratio: f64,
    /// Documents with at least two mentions.
    pub multi_mention_docs: usize,
}

/// Overall false rate `Σf / Σn`.
pub fn false_rate(corpus: &Corpus) -> Result<f64> {
    let (n, f) = corpus.totals();
    if n == 0 {
        return Err(Error::Empty("corpus has no mentions".into()));
    }
    Ok(f as f64 / n as f64)
}

fn pairs(k: u64) -> f64 {
    (k * k.saturating_sub(1)) as f64 / 2.0
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    let p = false_rate(corpus)?;
    let multi: Vec<&Document> = corpus.documents.iter().filter(|d| d.n >= 2).collect();
    if multi.is_empty() {
        return Err(Error::Undefined("pairwise false probability needs a document with ≥ 2 mentions".into()));
    }
    let pairwise_false =
        multi.iter().map(|d| pairs(d.f)).sum::<f64>() / multi.iter().map(|d| pairs(d.n)).sum::<f64>();
    if p == 0.0 || p == 1.0 {
        return Err(Error::Undefined(format!("clustering ratio is undefined at p = {p}")));
    }
    let m = multi.len() as f64;
    let observed = multi
        .iter()
        .map(|d| (d.f as f64 / d.n as f64 - p).powi(2))
        .sum::<f64>()
        / m;
    let expected = multi.iter().map(|d| p * (1.0 - p) / d.n as f64).sum::<f64>() / m;
    Ok(CorpusStats {
        p,
        pairwise_false,
        independence_baseline: p * p,
        clustering_ratio: observed / expected,
        multi_mention_docs: multi.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Result {
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson χ² on the `2 × M` table of false/true counts per document
/// (documents with `n ≥ 1`), `M − 1` degrees of freedom.
pub fn chi2_independence(corpus: &Corpus) -> Result<Chi2Result> {
    let docs: Vec<&Document> = corpus.documents.iter().filter(|d| d.n > 0).collect();
    if docs.len() < 2 {
        return Err(Error::Undefined("χ² needs at least two non-empty documents".into()));
    }
    let (n, f) = corpus.totals();
    if f == 0 || f == n {
        return Err(Error::Undefined("χ² is undefined with a zero label marginal".into()));
    }
    let (n, f) = (n as f64, f as f64);
    let t = n - f;
    let mut chi2 = 0.0;
    for d in &docs {
        let nd = d.n as f64;
        let (ef, et) = (nd * f / n, nd * t / n);
        let of = d.f as f64;
        let ot = nd - of;
        chi2 += (of - ef).powi(2) / ef + (ot - et).powi(2) / et;
    }
    let dof = docs.len() - 1;
    Ok(Chi2Result {
        chi2,
        dof,
        p_value: gamma_q(dof as f64 / 2.0, chi2 / 2.0)?,
    })
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITERS: usize = 10_000;

/// Upper regularized incomplete gamma `Q(a, x) = Γ(a, x)/Γ(a)`: series for
/// `x < a + 1`, Lentz continued fraction otherwise.
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(x >= 0.0) {
        return Err(Error::invalid("gamma_q", format!("needs a > 0, x ≥ 0 (got a = {a}, x = {x})")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..GAMMA_MAX_ITERS {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                return Ok((1.0 - sum * log_prefactor.exp()).max(0.0));
            }
        }
        Err(Error::NonFinite {
            what: "incomplete gamma series".into(),
            step: GAMMA_MAX_ITERS,
        })
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITERS {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                return Ok(log_prefactor.exp() * h);
            }
        }
        Err(Error::NonFinite {
            what: "incomplete gamma continued fraction".into(),
            step: GAMMA_MAX_ITERS,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use proptest::prelude::*;
    use rand::Rng as _;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn planted() -> Corpus {
        Corpus::from_labels([
            ("a", vec![true, true]),
            ("b", vec![true, true]),
            ("c", vec![false, false]),
            ("d", vec![false, false]),
        ])
        .unwrap()
    }

    #[test]
    fn planted_clustering_values() {
        let s = corpus_stats(&planted()).unwrap();
        assert_eq!(s.p, 0.5);
        assert_eq!(s.pairwise_false, 0.5);
        assert_eq!(s.independence_baseline, 0.25);
        assert!((s.clustering_ratio - 2.0).abs() < 1e-15);
        assert!(s.pairwise_false >= s.p * s.p);
    }

    #[test]
    fn degenerate_corpora() {
        let all_true = Corpus::from_labels([("a", vec![false, false]), ("b", vec![false])]).unwrap();
        assert_eq!(false_rate(&all_true).unwrap(), 0.0);
        assert!(matches!(corpus_stats(&all_true), Err(Error::Undefined(_))));
        let singles = Corpus::from_labels([("a", vec![true]), ("b", vec![false])]).unwrap();
        assert!(matches!(corpus_stats(&singles), Err(Error::Undefined(_))));
        assert!(Corpus::new(vec![Document {
            doc_id: "x".into(),
            n: 1,
            f: 2
        }])
        .is_err());
    }

    #[test]
    fn chi2_two_documents() {
        let corpus = Corpus::from_labels([("a", vec![true, true]), ("b", vec![false, false])]).unwrap();
        let r = chi2_independence(&corpus).unwrap();
        assert!((r.chi2 - 4.0).abs() < 1e-12);
        assert_eq!(r.dof, 1);
        assert!((r.p_value - 0.045_500_263_896_358_4).abs() < 1e-12, "{}", r.p_value);
    }

    #[test]
    fn chi2_zero_for_identical_documents() {
        let corpus = Corpus::from_labels((0..5).map(|i| (format!("d{i}"), vec![true, false, false, true]))).unwrap();
        let r = chi2_independence(&corpus).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p_value, 1.0);
        let empty_marginal = Corpus::from_labels([("a", vec![false]), ("b", vec![false])]).unwrap();
        assert!(chi2_independence(&empty_marginal).is_err());
    }

    #[test]
    fn jsonl_both_forms() {
        let text = "{\"doc_id\": \"a\", \"labels\": [1, 0, 1]}\n\n{\"doc_id\": \"b\", \"n\": 4, \"f\": 0}\n";
        let c = Corpus::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(c.documents[0], Document { doc_id: "a".into(), n: 3, f: 2 });
        assert_eq!(c.documents[1], Document { doc_id: "b".into(), n: 4, f: 0 });
        assert!(Corpus::from_jsonl("{\"doc_id\": \"a\", \"labels\": [2]}".as_bytes()).is_err());
        assert!(Corpus::from_jsonl("not json".as_bytes()).is_err());
    }

    #[test]
    fn gamma_q_matches_reference() {
        for &dof in &[1.0, 2.0, 5.0, 17.0, 300.0, 2912.0] {
            let dist = ChiSquared::new(dof).unwrap();
            for &mult in &[0.05, 0.5, 0.9, 1.0, 1.2, 2.0, 4.0] {
                let x = dof * mult;
                let ours = gamma_q(dof / 2.0, x / 2.0).unwrap();
                let reference = dist.sf(x);
                let rel = (ours - reference).abs() / reference.max(1e-300);
                assert!(rel <= 1e-10, "dof={dof} x={x}: {ours} vs {reference}");
            }
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn null_p_values_are_uniform() {
        let mut rng = rng::stream(0, Stream::Custom(20));
        let mut pvals: Vec<f64> = (0..1000)
            .map(|_| {
                let docs = (0..50).map(|i| {
                    let labels: Vec<bool> = (0..40).map(|_| rng.random_bool(0.3)).collect();
                    (format!("d{i}"), labels)
                });
                chi2_independence(&Corpus::from_labels(docs).unwrap()).unwrap().p_value
            })
            .collect();
        pvals.sort_by(f64::total_cmp);
        let m = pvals.len() as f64;
        let ks = pvals
            .iter()
            .enumerate()
            .map(|(i, &p)| ((i + 1) as f64 / m - p).max(p - i as f64 / m))
            .fold(0.0, f64::max);
        assert!(ks <= 0.05, "KS distance {ks}");
    }

    proptest! {
        #[test]
        fn stats_invariant_under_reordering(counts in proptest::collection::vec((2u64..20, 0u64..20), 2..12), seed in 0u64..50) {
            let docs: Vec<Document> = counts
                .iter()
                .enumerate()
                .map(|(i, &(n, f))| Document { doc_id: i.to_string(), n, f: f.min(n) })
                .collect();
            let a = Corpus::new(docs.clone()).unwrap();
            let mut shuffled = docs;
            let mut rng = rng::stream(seed, Stream::Custom(21));
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let b = Corpus::new(shuffled).unwrap();
            match (corpus_stats(&a), corpus_stats(&b)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x.p - y.p).abs() < 1e-15);
                    prop_assert!((x.pairwise_false - y.pairwise_false).abs() < 1e-12);
                    prop_assert!((x.clustering_ratio - y.clustering_ratio).abs() < 1e-9 * x.clustering_ratio.max(1.0));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "only one ordering failed"),
            }
            if let (Ok(x), Ok(y)) = (chi2_independence(&a), chi2_independence(&b)) {
                prop_assert!(x.chi2 >= 0.0);
                prop_assert!((x.chi2 - y.chi2).abs() < 1e-9 * x.chi2.max(1.0));
            }
        }
    }
}
