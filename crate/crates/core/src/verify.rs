//! Gradient verification of the full sequence loss on toy models of both
//! tasks, used by the `gradcheck` command and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, Field, InfoboxRecord, QgExample, Vocabs, Vocabulary};
use crate::network::{ModelConfig, Seq2Seq, Task};
use crate::tensor::init::uniform;
use crate::tensor::{finite_difference_check, BackwardFault, FdReport, ParamStore, Probes};
use crate::training::{sequence_nll, Prepared, Result};

/// Largest acceptable finite-difference relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 3e-4;

/// Embedding init bound of the gradient-check models.
pub const TOY_EMBEDDING_BOUND: f64 = 1.0;

/// A small network, its weights and one training pair.
#[derive(Debug, Clone)]
pub struct ToyCase {
    pub net: Seq2Seq,
    pub params: ParamStore,
    pub example: Prepared,
}

fn strs(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// 20-word vocabulary, `hidden`-unit network (two encoder layers for
/// questions), and an example whose source contains an out-of-vocabulary
/// word that also appears in the target, so the copy path is exercised.
pub fn toy_case(task: Task, hidden: usize, seed: u64) -> ToyCase {
    let words = Vocabulary::from_tokens(
        strs(&[
            "the", "a", "was", "born", "in", "of", "who", "where", "when", "is", "john", "smith", "paris", "1950",
            "poet", "?",
        ]),
        16,
    );
    let (example, vocabs, mut config) = match task {
        Task::Table2Text => {
            let fields = Vocabulary::from_tokens(strs(&["name", "birth_place", "occupation"]), 4);
            let vocabs = Vocabs {
                words,
                fields: Some(fields),
            };
            let rec = InfoboxRecord {
                fields: vec![
                    Field {
                        name: "name".into(),
                        tokens: strs(&["john", "smith"]),
                    },
                    Field {
                        name: "birth_place".into(),
                        tokens: strs(&["paris"]),
                    },
                    Field {
                        name: "occupation".into(),
                        tokens: strs(&["zither", "poet"]),
                    },
                ],
                reference: strs(&["john", "smith", "was", "a", "zither", "poet"]),
            };
            let ex = Example::from_table(&rec, &vocabs);
            let mut c = ModelConfig::table2text(vocabs.words.len(), 7);
            c.word_dim = 6;
            c.field_dim = 3;
            c.pos_dim = 2;
            c.encoder_layers = 1;
            (ex, vocabs, c)
        }
        Task::Qg => {
            let vocabs = Vocabs { words, fields: None };
            let q = QgExample {
                passage_tokens: strs(&["john", "smith", "was", "born", "in", "zurich", "in", "1950"]),
                answer_span: (5, 5),
                question_tokens: strs(&["where", "was", "john", "born", "zurich", "?"]),
            };
            let ex = Example::from_question(&q, &vocabs).expect("valid span");
            let mut c = ModelConfig::qg(vocabs.words.len());
            c.word_dim = 6;
            c.encoder_layers = 2;
            c.freeze_word_embeddings = false;
            (ex, vocabs, c)
        }
    };
    config.hidden_dim = hidden;
    config.dropout_p = 0.0;
    let net = Seq2Seq::new(config).expect("valid toy config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng);
    // Embeddings at the training init are so small that encoder states
    // barely differ and attention gradients sink below f64 resolution of a
    // central difference; spread them out so every group is measurable.
    let names: Vec<String> = params.names().filter(|n| n.starts_with("emb.")).cloned().collect();
    for name in names {
        let t = params.get(&name).expect("listed").clone();
        params.insert(name, uniform(t.shape(), TOY_EMBEDDING_BOUND, &mut rng).with_requires_grad(t.requires_grad));
    }
    let example = Prepared::new(example, &vocabs.words);
    ToyCase { net, params, example }
}

/// Finite-difference check of the summed sequence loss over every trainable
/// parameter of `case`, `per_param` random coordinates each. `fault`
/// deliberately corrupts one backward rule.
pub fn check_case(case: &ToyCase, per_param: usize, seed: u64, fault: Option<BackwardFault>) -> Result<FdReport> {
    check_case_eps(case, per_param, seed, fault, GRADCHECK_EPS)
}

pub fn check_case_eps(case: &ToyCase, per_param: usize, seed: u64, fault: Option<BackwardFault>, eps: f64) -> Result<FdReport> {
    let report = finite_difference_check(
        |g| {
            g.set_fault(fault);
            sequence_nll(&case.net, g, &case.example, None).map_err(|e| match e {
                crate::training::TrainError::Tensor(t) => t,
                other => crate::tensor::TensorError::Other(other.to_string()),
            })
        },
        &case.params,
        eps,
        &Probes::Random { per_param, seed },
    )?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub task: Task,
    pub report: FdReport,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Checks toy models (hidden 8, vocabulary 20) of both tasks.
pub fn gradcheck_toy_models(seed: u64, per_param: usize, fault: Option<BackwardFault>) -> Result<Vec<GradcheckSummary>> {
    [Task::Table2Text, Task::Qg]
        .into_iter()
        .map(|task| {
            let case = toy_case(task, 8, seed);
            Ok(GradcheckSummary {
                task,
                report: check_case(&case, per_param, seed, fault)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpKind;

    #[test]
    fn toy_cases_have_twenty_words_and_copy_targets() {
        for task in [Task::Table2Text, Task::Qg] {
            let c = toy_case(task, 8, 1);
            assert_eq!(c.net.config.word_vocab, 20);
            assert_eq!(c.example.oov.extended_size(), 21);
            assert!(c.example.target.contains(&20));
            assert_eq!(c.example.unknown_targets, 0);
        }
    }

    #[test]
    fn toy_models_pass_and_faults_are_caught() {
        let ok = gradcheck_toy_models(3, 6, None).unwrap();
        for s in &ok {
            assert!(s.passed(), "{:?}: {:?}", s.task, s.report.per_param);
            assert!(s.report.probes >= 100);
        }
        let fault = BackwardFault {
            op: OpKind::Tanh,
            factor: 1.5,
        };
        let bad = gradcheck_toy_models(3, 6, Some(fault)).unwrap();
        assert!(bad.iter().all(|s| !s.passed()));
    }
}
