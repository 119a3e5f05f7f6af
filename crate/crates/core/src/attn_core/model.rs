use super::ModelConfig;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Projection matrices of one attention head.
///
/// `w_q`, `w_k`, `w_v` are `d_model x d_head`, `w_o` is `d_head x d_model`,
/// all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Vec<Vec<f64>>,
    pub w_k: Vec<Vec<f64>>,
    pub w_v: Vec<Vec<f64>>,
    pub w_o: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
}

/// Attention-only decoder weights: embedding and unembedding tables, learned
/// absolute positional embeddings, per-layer per-head projections, and an
/// optional fixed BOS embedding prepended ahead of the visual prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub schema: u32,
    pub config: ModelConfig,
    /// `vocab_size x d_model`, row-major.
    pub embedding: Vec<Vec<f64>>,
    /// `vocab_size x d_model`, row-major; `logits[v] = dot(unembedding[v], h)`.
    pub unembedding: Vec<Vec<f64>>,
    /// `max_positions x d_model`; added to every position's input embedding.
    pub positional: Vec<Vec<f64>>,
    /// Optional fixed embedding occupying position 0, ahead of the image slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_embedding: Option<Vec<f64>>,
    pub layers: Vec<LayerWeights>,
}

fn check_matrix(
    name: &str,
    m: &[Vec<f64>],
    rows: usize,
    cols: usize,
) -> Result<()> {
    if m.len() != rows {
        return Err(CoreError::ModelFile(format!(
            "{name}: expected {rows} rows, got {}",
            m.len()
        )));
    }
    for (i, r) in m.iter().enumerate() {
        if r.len() != cols {
            return Err(CoreError::ModelFile(format!(
                "{name}: row {i} has {} columns, expected {cols}",
                r.len()
            )));
        }
        if !r.iter().all(|v| v.is_finite()) {
            return Err(CoreError::ModelFile(format!("{name}: row {i} has non-finite entries")));
        }
    }
    Ok(())
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        if self.schema != 1 {
            return Err(CoreError::ModelFile(format!(
                "unsupported schema version {}",
                self.schema
            )));
        }
        check_matrix("embedding", &self.embedding, c.vocab_size, c.d_model)?;
        check_matrix("unembedding", &self.unembedding, c.vocab_size, c.d_model)?;
        if self.positional.is_empty() {
            return Err(CoreError::ModelFile("positional table is empty".into()));
        }
        check_matrix("positional", &self.positional, self.positional.len(), c.d_model)?;
        if let Some(bos) = &self.bos_embedding {
            if bos.len() != c.d_model {
                return Err(CoreError::ModelFile(format!(
                    "bos_embedding: expected length {}, got {}",
                    c.d_model,
                    bos.len()
                )));
            }
        }
        if self.layers.len() != c.num_layers {
            return Err(CoreError::ModelFile(format!(
                "expected {} layers, got {}",
                c.num_layers,
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != c.num_heads {
                return Err(CoreError::ModelFile(format!(
                    "layer {l}: expected {} heads, got {}",
                    c.num_heads,
                    layer.heads.len()
                )));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                check_matrix(&format!("layer {l} head {h} w_q"), &head.w_q, c.d_model, c.d_head)?;
                check_matrix(&format!("layer {l} head {h} w_k"), &head.w_k, c.d_model, c.d_head)?;
                check_matrix(&format!("layer {l} head {h} w_v"), &head.w_v, c.d_model, c.d_head)?;
                check_matrix(&format!("layer {l} head {h} w_o"), &head.w_o, c.d_head, c.d_model)?;
            }
        }
        Ok(())
    }

    /// A model with all projections, tables and embeddings zeroed.
    pub fn zeroed(config: ModelConfig, max_positions: usize) -> Result<Self> {
        config.validate()?;
        let zero_head = HeadWeights {
            w_q: vec![vec![0.0; config.d_head]; config.d_model],
            w_k: vec![vec![0.0; config.d_head]; config.d_model],
            w_v: vec![vec![0.0; config.d_head]; config.d_model],
            w_o: vec![vec![0.0; config.d_model]; config.d_head],
        };
        Ok(Self {
            schema: 1,
            config,
            embedding: vec![vec![0.0; config.d_model]; config.vocab_size],
            unembedding: vec![vec![0.0; config.d_model]; config.vocab_size],
            positional: vec![vec![0.0; config.d_model]; max_positions],
            bos_embedding: None,
            layers: vec![
                LayerWeights {
                    heads: vec![zero_head; config.num_heads]
                };
                config.num_layers
            ],
        })
    }

    pub fn embed_token(&self, token: u32) -> Result<&[f64]> {
        self.embedding
            .get(token as usize)
            .map(|v| v.as_slice())
            .ok_or_else(|| CoreError::Precondition(format!("token id {token} out of vocabulary")))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 1,
            d_model: 2,
            d_head: 2,
            vocab_size: 3,
        }
    }

    #[test]
    fn zeroed_model_validates() {
        let m = Model::zeroed(tiny_config(), 8).unwrap();
        m.validate().unwrap();
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut m = Model::zeroed(tiny_config(), 4).unwrap();
        m.embedding[1][0] = 0.1 + 0.2; // not exactly representable as 0.3
        m.layers[0].heads[0].w_q[0][1] = -1.5e-7;
        let s = m.to_json_string().unwrap();
        let back = Model::from_json_str(&s).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn shape_errors_name_expectations() {
        let mut m = Model::zeroed(tiny_config(), 4).unwrap();
        m.embedding.pop();
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("embedding"), "{err}");
        assert!(err.contains("expected 3 rows"), "{err}");
    }

    #[test]
    fn config_invariant_enforced() {
        let bad = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 5,
            d_head: 2,
            vocab_size: 3,
        };
        assert!(bad.validate().is_err());
    }
}
