//! Deterministic construction of the toy decoder family.
//!
//! Layer roles: layer 0 suppresses re-emission of already generated objects,
//! the middle layers read the visual prefix into object logits, and the last
//! layer probes object presence for yes/no questions. Position 0 holds a BOS
//! token that doubles as an attention sink: image and query-prompt rows are
//! steered onto it during prefill so their residuals stay clean of mixed-in
//! object content.

use super::consts::*;
use super::{object_token, query_token, PathologyConfig, SyntheticScene, TOY_VOCAB, V_OBJ};
use crate::attn_core::{Model, ModelConfig};
use crate::error::{CoreError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// The standard architecture of the toy family.
pub fn toy_model_config(num_layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers,
        num_heads: 4,
        d_model: 32,
        d_head: 8,
        vocab_size: TOY_VOCAB,
    }
}

/// Unit embedding of object `o`: paired objects (2p, 2p+1) share a plane and
/// overlap with cosine `RHO`; other pairs are exactly orthogonal.
pub fn object_embedding(object: usize) -> Vec<f64> {
    let phi = (RHO).asin() / 2.0;
    let (c, s) = (phi.cos(), phi.sin());
    let pair = object / 2;
    let mut v = vec![0.0; CONTENT_DIMS];
    if object % 2 == 0 {
        v[2 * pair] = c;
        v[2 * pair + 1] = s;
    } else {
        v[2 * pair] = s;
        v[2 * pair + 1] = c;
    }
    v
}

/// Dual of the object basis: `<object_embedding(a), dual_embedding(b)> =
/// delta(a, b)` exactly, so suppression of one object never touches others.
fn dual_embedding(object: usize) -> Vec<f64> {
    let phi = (RHO).asin() / 2.0;
    let (c, s) = (phi.cos(), phi.sin());
    let det = c * c - s * s;
    let pair = object / 2;
    let mut v = vec![0.0; CONTENT_DIMS];
    if object % 2 == 0 {
        v[2 * pair] = c / det;
        v[2 * pair + 1] = -s / det;
    } else {
        v[2 * pair] = -s / det;
        v[2 * pair + 1] = c / det;
    }
    v
}

fn write_slot_content(slot: &mut [f64], object: usize, strength: f64) {
    let emb = object_embedding(object);
    for (d, val) in emb.iter().enumerate() {
        slot[d] += strength * val;
    }
    slot[OCC_DIM] += strength;
    slot[PAIR_DIMS[object / 2]] += strength;
}

/// Image-slot embeddings for a scene: present objects at full strength at
/// their slots, faint distractor imprints in otherwise empty slots, and the
/// image marker everywhere. Slot content fills three channels: the exact
/// object content, the occupancy key, and the pair-level key.
pub fn scene_embeddings(scene: &SyntheticScene) -> Vec<Vec<f64>> {
    let mut slots: Vec<Vec<f64>> = (0..super::N_SLOTS)
        .map(|_| {
            let mut v = vec![0.0; 32];
            v[IMG_MARK] = 1.0;
            v
        })
        .collect();
    for (&obj, &slot) in scene.present.iter().zip(&scene.slots) {
        write_slot_content(&mut slots[slot], obj, A_PRESENT);
    }
    let occupied: std::collections::BTreeSet<usize> = scene.slots.iter().copied().collect();
    let empty: Vec<usize> = (0..super::N_SLOTS).filter(|s| !occupied.contains(s)).collect();
    for (i, &slot) in empty.iter().enumerate() {
        if i >= scene.distractors.len() {
            break;
        }
        write_slot_content(&mut slots[slot], scene.distractors[i], A_IMPRINT);
    }
    slots
}

fn zeros(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; cols]; rows]
}

/// Rotation by `theta` in the plane spanned by orthonormal `u`, `v`.
fn plane_rotation(u: &[f64], v: &[f64], theta: f64, dim: usize) -> Vec<Vec<f64>> {
    let (c, s) = (theta.cos(), theta.sin());
    let mut r = zeros(dim, dim);
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for i in 0..dim {
        for j in 0..dim {
            r[i][j] += (c - 1.0) * (u[i] * u[j] + v[i] * v[j]);
            r[i][j] += s * (u[i] * v[j] - v[i] * u[j]);
        }
    }
    r
}

fn random_unit_in(rng: &mut ChaCha8Rng, dim: usize, support: &[usize]) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; dim];
        for &d in support {
            v[d] = StandardNormal.sample(rng);
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn random_orthonormal_pair(
    rng: &mut ChaCha8Rng,
    dim: usize,
    support: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let u = random_unit_in(rng, dim, support);
    loop {
        let mut w = random_unit_in(rng, dim, support);
        let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        for (wi, ui) in w.iter_mut().zip(&u) {
            *wi -= dot * ui;
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return (u, w.into_iter().map(|x| x / norm).collect());
        }
    }
}

/// `w (rows x dim) * r (dim x dim)`.
fn apply_rotation_right(w: &mut [Vec<f64>], r: &[Vec<f64>]) {
    let dim = r.len();
    for row in w.iter_mut() {
        let mut out = vec![0.0; dim];
        for (k, &x) in row.iter().enumerate() {
            if x != 0.0 {
                for (o, rv) in out.iter_mut().zip(&r[k]) {
                    *o += x * rv;
                }
            }
        }
        row.copy_from_slice(&out);
    }
}

/// `r^T (rows x rows) * w (rows x cols)`: the query reads a rotated view of
/// the residual stream.
fn apply_rotation_left(w: &mut Vec<Vec<f64>>, r: &[Vec<f64>]) {
    let rows = w.len();
    let cols = w[0].len();
    let mut out = vec![vec![0.0; cols]; rows];
    for (k, w_row) in w.iter().enumerate() {
        for (d, r_val) in r[k].iter().enumerate() {
            if *r_val != 0.0 {
                for c in 0..cols {
                    out[d][c] += r_val * w_row[c];
                }
            }
        }
    }
    *w = out;
}

/// Build a toy model with the standard vocabulary geometry.
pub fn build_toy_model(config: &ModelConfig, pathology: &PathologyConfig) -> Result<Model> {
    build_toy_model_geom(config, pathology, V_OBJ, super::N_SLOTS)
}

/// Build a toy model, checking the geometry explicitly.
pub fn build_toy_model_geom(
    config: &ModelConfig,
    pathology: &PathologyConfig,
    v_obj: usize,
    n_slots: usize,
) -> Result<Model> {
    config.validate()?;
    pathology.validate()?;
    if v_obj > n_slots {
        return Err(CoreError::InvalidConfig(format!(
            "object vocabulary ({v_obj}) exceeds the visual slot count ({n_slots})"
        )));
    }
    if v_obj % 2 != 0 || v_obj > HEAD_CONTENT * config.num_heads {
        return Err(CoreError::InvalidConfig(format!(
            "object vocabulary {v_obj} does not fit {} heads with {HEAD_CONTENT} content dims",
            config.num_heads
        )));
    }
    if config.d_model != 32 || config.d_head != 8 || config.num_heads != 4 {
        return Err(CoreError::InvalidConfig(
            "the toy family is wired for d_model=32, 4 heads of d_head=8".into(),
        ));
    }
    if config.num_layers < 3 {
        return Err(CoreError::InvalidConfig(
            "the toy family needs at least 3 layers".into(),
        ));
    }
    if config.vocab_size != 5 + 2 * v_obj {
        return Err(CoreError::InvalidConfig(format!(
            "toy vocabulary must be {} (got {})",
            5 + 2 * v_obj,
            config.vocab_size
        )));
    }

    let mut model = Model::zeroed(*config, MAX_POSITIONS)?;
    let q0 = (config.d_head as f64).sqrt();
    let num_readers = config.num_layers - 2;
    // Nominal step-1 weight of an occupied slot (6 present, 6 imprinted, 4
    // empty); fixes the reader value scale so one unmentioned present object
    // lands near P_TARGET.
    let occ = (S_READER + OCC_KEY * A_PRESENT).exp();
    let imp = (S_READER + OCC_KEY * A_IMPRINT).exp();
    let w1 = occ / (6.0 * occ + 6.0 * imp + 4.0 * S_READER.exp() + 2.0);
    let value_units = 1.0 + (num_readers as f64 - 1.0) * REL_READER2;
    let reader_value = P_TARGET / (value_units * w1 * C_U);
    let probe_content = (PROBE_GAIN * q0 / Q_OBJ).sqrt();

    for l in 0..config.num_layers {
        for h in 0..config.num_heads {
            let head = &mut model.layers[l].heads[h];
            // Sink seeking and the shared sink key channel exist in every
            // layer so image and query-prompt rows stay inert at prefill.
            head.w_q[IMG_MARK][E_SINK] = SEEK;
            head.w_q[PQ_MARK][E_SINK] = SEEK;
            head.w_k[SINK_POS][E_SINK] = SINK_KEY * q0;

            let block = h * HEAD_CONTENT;
            if l == 0 {
                // Recall suppression: attend generated tokens, read their
                // object content through the dual basis, subtract. Value
                // coordinate `local` represents object `block + local`.
                head.w_q[CONST_DIM][E_BASE] = M_SUPPRESS * q0;
                head.w_k[GEN_MARK][E_BASE] = S_GEN;
                head.w_k[SINK_POS][E_BASE] = S_SINK_L0;
                for local in 0..HEAD_CONTENT {
                    let dual = dual_embedding(block + local);
                    for d in 0..CONTENT_DIMS {
                        if dual[d] != 0.0 {
                            head.w_v[d][local] = -C_INH * dual[d];
                        }
                    }
                    head.w_o[local][block + local] = 1.0;
                }
            } else if l < config.num_layers - 1 {
                // Reader: base image attention with a decaying query gain,
                // mild content keys, content values into object logits.
                head.w_q[DECAY_DIM][E_BASE] = q0;
                head.w_k[IMG_MARK][E_BASE] = S_READER;
                head.w_k[GEN_MARK][E_BASE] = -S_GEN_READER;
                head.w_k[OCC_DIM][E_BASE] = OCC_KEY;
                // Keys: the head's two pairs on head dims 0, 1. Values: the
                // head's four objects on head dims 0..4.
                head.w_k[PAIR_DIMS[2 * h]][0] = K_CONTENT;
                head.w_k[PAIR_DIMS[2 * h + 1]][1] = K_CONTENT;
                let scale = if l == 1 { reader_value } else { REL_READER2 * reader_value };
                for local in 0..HEAD_CONTENT {
                    head.w_v[block + local][local] = scale;
                    head.w_o[local][block + local] = 1.0;
                }
            } else {
                // Presence probe: pair-keyed lookup answering yes/no. The
                // pair channel is never written by layer outputs, so the
                // probe stays blind to accumulated residual content.
                head.w_q[CONST_DIM][E_BASE] = q0;
                head.w_k[IMG_MARK][E_BASE] = -PEN_PROBE;
                head.w_k[GEN_MARK][E_BASE] = -PEN_PROBE_TEXT;
                head.w_q[PAIR_DIMS[2 * h]][0] = probe_content;
                head.w_q[PAIR_DIMS[2 * h + 1]][1] = probe_content;
                head.w_k[PAIR_DIMS[2 * h]][0] = probe_content;
                head.w_k[PAIR_DIMS[2 * h + 1]][1] = probe_content;
                head.w_v[IMG_MARK][E_YES] = C_YES;
                head.w_o[E_YES][YES_DIM] = 1.0;
            }
        }
    }

    // Token embeddings.
    for o in 0..v_obj {
        let v = object_embedding(o);
        let tok = object_token(o) as usize;
        for (d, val) in v.iter().enumerate() {
            model.embedding[tok][d] = B_TEXT * val;
        }
        model.embedding[tok][PAIR_DIMS[o / 2]] = B_TEXT;
        model.embedding[tok][GEN_MARK] = 1.0;

        let qtok = query_token(o) as usize;
        for (d, val) in v.iter().enumerate() {
            model.embedding[qtok][d] = Q_OBJ * val;
        }
        model.embedding[qtok][PAIR_DIMS[o / 2]] = Q_OBJ;
        model.embedding[qtok][GEN_MARK] = 1.0;
    }
    model.embedding[super::TOKEN_QUERY_PROMPT as usize][PQ_MARK] = 1.0;
    // Prompt and answer tokens count as text rows for the attention wiring:
    // suppressor and probe treat them as inert, readers skip them.
    for tok in [
        super::TOKEN_CAPTION_PROMPT,
        super::TOKEN_YES,
        super::TOKEN_NO,
    ] {
        model.embedding[tok as usize][GEN_MARK] = 1.0;
    }

    // Unembedding.
    model.unembedding[crate::attn_core::EOS_TOKEN as usize][DECAY_DIM] = THETA_EOS;
    model.unembedding[super::TOKEN_YES as usize][YES_DIM] = 1.0;
    model.unembedding[super::TOKEN_NO as usize][CONST_DIM] = C_NO;
    model.unembedding[super::TOKEN_CAPTION_PROMPT as usize][CONST_DIM] = -1.0;
    model.unembedding[super::TOKEN_QUERY_PROMPT as usize][CONST_DIM] = -1.0;
    for o in 0..v_obj {
        let v = object_embedding(o);
        let tok = object_token(o) as usize;
        for (d, val) in v.iter().enumerate() {
            model.unembedding[tok][d] = C_U * val;
        }
        model.unembedding[query_token(o) as usize][CONST_DIM] = -1.0;
    }

    // Positional table: const everywhere, the sink marker at position 0, and
    // the decaying visual query gain after the image block.
    let image_end = 1 + n_slots;
    for (p, row) in model.positional.iter_mut().enumerate() {
        row[CONST_DIM] = 1.0;
        if p == 0 {
            row[SINK_POS] = 1.0;
        }
        if p >= image_end {
            row[DECAY_DIM] = pathology.lambda_decay.powi((p - image_end + 1) as i32);
        }
    }

    model.bos_embedding = Some(vec![0.0; 32]);

    // Per-head query rotations: heads stop agreeing on where to look. The
    // input-side rotation lives in the semantic read subspace (content, gain
    // and const dims), so the query gain jitters with the current token; the
    // head-space rotation couples the query to per-slot content keys. The
    // routing markers and the sink channel stay untouched.
    if pathology.sigma_head > 0.0 {
        // Content and visual-gain reads jitter; the const routing read does
        // not, so suppression and probing stay structurally alive.
        let semantic: Vec<usize> = (0..CONTENT_DIMS).chain([DECAY_DIM]).collect();
        let head_dims: Vec<usize> = (0..config.d_head).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(pathology.seed);
        for l in 0..config.num_layers {
            for h in 0..config.num_heads {
                let z_in: f64 = StandardNormal.sample(&mut rng);
                let theta_in = (ROT_SCALE * pathology.sigma_head * z_in).clamp(-THETA_CLAMP, THETA_CLAMP);
                let (u, v) = random_orthonormal_pair(&mut rng, config.d_model, &semantic);
                let r_in = plane_rotation(&u, &v, theta_in, config.d_model);

                let z_out: f64 = StandardNormal.sample(&mut rng);
                let theta_out = (ROT_SCALE * pathology.sigma_head * z_out).clamp(-THETA_CLAMP, THETA_CLAMP);
                let (u, v) = random_orthonormal_pair(&mut rng, config.d_head, &head_dims);
                let r_out = plane_rotation(&u, &v, theta_out, config.d_head);

                let w_q = &mut model.layers[l].heads[h].w_q;
                apply_rotation_left(w_q, &r_in);
                apply_rotation_right(w_q, &r_out);
            }
        }
    }

    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn object_embeddings_are_unit_with_pair_overlap() {
        for o in 0..V_OBJ {
            let v = object_embedding(o);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
        let a = object_embedding(0);
        let b = object_embedding(1);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_abs_diff_eq!(dot, RHO, epsilon = 1e-12);
        let c = object_embedding(2);
        let cross: f64 = a.iter().zip(&c).map(|(x, y)| x * y).sum();
        assert_abs_diff_eq!(cross, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dual_basis_is_exact() {
        for a in 0..V_OBJ {
            let dual = dual_embedding(a);
            for b in 0..V_OBJ {
                let v = object_embedding(b);
                let dot: f64 = v.iter().zip(&dual).map(|(x, y)| x * y).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = toy_model_config(4);
        let path = PathologyConfig {
            sigma_head: 0.8,
            lambda_decay: 0.97,
            seed: 17,
        };
        let a = build_toy_model(&cfg, &path).unwrap();
        let b = build_toy_model(&cfg, &path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clean_build_has_identity_rotations() {
        let cfg = toy_model_config(4);
        let clean = build_toy_model(&cfg, &PathologyConfig::default()).unwrap();
        let seeded = build_toy_model(&cfg, &PathologyConfig::default().with_seed(99)).unwrap();
        assert_eq!(clean, seeded);
    }

    #[test]
    fn geometry_errors() {
        let cfg = toy_model_config(4);
        let path = PathologyConfig::default();
        assert!(build_toy_model_geom(&cfg, &path, 18, 16).is_err());
        let mut bad = cfg;
        bad.num_layers = 2;
        assert!(build_toy_model_geom(&bad, &path, 16, 16).is_err());
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, v) = random_orthonormal_pair(&mut rng, 8, &(0..8).collect::<Vec<_>>());
        let r = plane_rotation(&u, &v, 0.7, 8);
        // R^T R = I
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..8).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, expect, epsilon = 1e-12);
            }
        }
    }
}
