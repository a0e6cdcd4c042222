use super::{dense, Binding, ModelConfig, Side};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Embeds pooled region features `(D, r, r)` into rows of a `(K, E)` matrix:
/// head `g` (two relu layers), projector `p`, then predictor `q` when
/// `use_predictor` is set. Only the online side has a predictor.
pub fn head_embed(graph: &mut Graph, b: &Binding, side: Side, cfg: &ModelConfig, pooled: &[Var], use_predictor: bool) -> Result<Var> {
    if use_predictor && side == Side::Target {
        return Err(Error::Config("the target network has no predictor".into()));
    }
    let flat = cfg.fpn_dim * cfg.roi_size * cfg.roi_size;
    let rows = pooled.iter().map(|&v| graph.reshape(v, &[1, flat])).collect::<Result<Vec<_>>>()?;
    let mut x = graph.concat_rows(&rows)?;
    let s = side.prefix();
    for layer in ["g.fc1", "g.fc2", "p.fc1"] {
        x = dense(graph, b, &format!("{s}.{layer}"), x)?;
        x = graph.relu(x);
    }
    x = dense(graph, b, &format!("{s}.p.fc2"), x)?;
    if use_predictor {
        x = dense(graph, b, &format!("{s}.q.fc1"), x)?;
        x = graph.relu(x);
        x = dense(graph, b, &format!("{s}.q.fc2"), x)?;
    }
    Ok(x)
}
