use serde::{Deserialize, Serialize};

use crate::data::MAX_POSITION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "table2text")]
    Table2Text,
    #[serde(rename = "qg")]
    Qg,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Table2Text => "table2text",
            Task::Qg => "qg",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table2text" => Ok(Task::Table2Text),
            "qg" => Ok(Task::Qg),
            other => Err(format!("unknown task `{other}` (expected table2text or qg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub word_dim: usize,
    pub field_dim: usize,
    pub pos_dim: usize,
    /// LSTM state size; the encoder output per position is twice this.
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub dropout_p: f64,
    pub word_vocab: usize,
    pub field_vocab: usize,
    pub max_position: usize,
    /// Word embeddings are fixed (pretrained) rather than trained.
    pub freeze_word_embeddings: bool,
}

impl ModelConfig {
    /// 400/50/5 embeddings, hidden 500, one encoder layer.
    pub fn table2text(word_vocab: usize, field_vocab: usize) -> Self {
        Self {
            task: Task::Table2Text,
            word_dim: 400,
            field_dim: 50,
            pos_dim: 5,
            hidden_dim: 500,
            encoder_layers: 1,
            dropout_p: 0.0,
            word_vocab,
            field_vocab,
            max_position: MAX_POSITION,
            freeze_word_embeddings: false,
        }
    }

    /// 300-d frozen word embeddings, hidden 350, two encoder layers, dropout 0.1.
    pub fn qg(word_vocab: usize) -> Self {
        Self {
            task: Task::Qg,
            word_dim: 300,
            field_dim: 0,
            pos_dim: 0,
            hidden_dim: 350,
            encoder_layers: 2,
            dropout_p: 0.1,
            word_vocab,
            field_vocab: 0,
            max_position: MAX_POSITION,
            freeze_word_embeddings: true,
        }
    }

    pub fn for_task(task: Task, word_vocab: usize, field_vocab: usize) -> Self {
        match task {
            Task::Table2Text => Self::table2text(word_vocab, field_vocab),
            Task::Qg => Self::qg(word_vocab),
        }
    }

    /// Width of one encoder input row.
    pub fn input_dim(&self) -> usize {
        match self.task {
            Task::Table2Text => self.word_dim + self.field_dim + 2 * self.pos_dim,
            Task::Qg => self.word_dim + 1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut bad = Vec::new();
        if self.word_dim == 0 || self.hidden_dim == 0 || self.encoder_layers == 0 {
            bad.push("word_dim, hidden_dim and encoder_layers must be positive".to_string());
        }
        if self.word_vocab <= crate::data::vocab::NUM_RESERVED {
            bad.push(format!("word vocabulary of {} has no real tokens", self.word_vocab));
        }
        if self.task == Task::Table2Text && (self.field_dim == 0 || self.pos_dim == 0 || self.field_vocab == 0) {
            bad.push("table2text needs positive field_dim, pos_dim and field vocabulary".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            bad.push(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad.join("; "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let t = ModelConfig::table2text(20004, 1484);
        assert_eq!((t.word_dim, t.field_dim, t.pos_dim, t.hidden_dim, t.encoder_layers), (400, 50, 5, 500, 1));
        assert_eq!(t.input_dim(), 460);
        let q = ModelConfig::qg(1000);
        assert_eq!((q.word_dim, q.hidden_dim, q.encoder_layers), (300, 350, 2));
        assert_eq!(q.input_dim(), 301);
        assert!(q.freeze_word_embeddings);
    }

    #[test]
    fn task_serde_names() {
        assert_eq!(serde_json::to_string(&Task::Table2Text).unwrap(), "\"table2text\"");
        assert_eq!("qg".parse::<Task>().unwrap(), Task::Qg);
    }
}
