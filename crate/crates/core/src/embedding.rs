//! Input embeddings for the forecaster.
//!
//! Three sources are concatenated along the channel axis into the hidden
//! representation:
//!
//! - a feature embedding, a learned linear lift of the raw scalar reading;
//! - a periodicity embedding, learned lookup tables for day-of-week and
//!   time-of-day slots, shared by all nodes;
//! - an adaptive embedding, a free table indexed by (frame, node) — or by
//!   node alone in the spatial-only variant — broadcast across the batch and
//!   trained end-to-end with everything else.
//!
//! All functions take pre-bound parameter handles so the same code path
//! serves training, evaluation, and gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Day-of-week slots per week.
pub const DAY_SLOTS: usize = 7;
/// Time-of-day slots per day (5-minute resolution).
pub const TIME_SLOTS: usize = 288;

/// Lifts raw readings `(batch, steps, nodes, 1)` to `(batch, steps, nodes, width)`
/// with a learned affine map shared across positions.
pub fn feature_embed(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let lifted = tape.matmul(x, weight)?;
    tape.add(lifted, bias)
}

/// Looks up day-of-week and time-of-day embeddings for every (batch, step)
/// pair and broadcasts them over nodes, yielding
/// `(batch, steps, nodes, 2 * width)` with the day-of-week half first.
///
/// `day` and `time` are flattened batch-major calendar indices of length
/// `batch * steps`; out-of-range entries are rejected by value.
pub fn periodicity_embed(
    tape: &mut Tape,
    day_table: Var,
    time_table: Var,
    day: &[usize],
    time: &[usize],
    batch: usize,
    steps: usize,
    nodes: usize,
) -> Result<Var> {
    if day.len() != batch * steps || time.len() != batch * steps {
        return Err(Error::Contract(format!(
            "periodicity_embed: calendar length {} / {} does not cover {batch} x {steps} windows",
            day.len(),
            time.len()
        )));
    }
    if let Some(&bad) = day.iter().find(|&&d| d >= DAY_SLOTS) {
        return Err(Error::IndexOutOfRange {
            what: "day-of-week slot",
            index: bad,
            size: DAY_SLOTS,
        });
    }
    if let Some(&bad) = time.iter().find(|&&t| t >= TIME_SLOTS) {
        return Err(Error::IndexOutOfRange {
            what: "time-of-day slot",
            index: bad,
            size: TIME_SLOTS,
        });
    }
    let d = tape.gather_rows(day_table, day)?;
    let t = tape.gather_rows(time_table, time)?;
    let cat = tape.concat_last(&[d, t])?;
    let width = tape.shape(cat)[1];
    let per_step = tape.reshape(cat, vec![batch, steps, 1, width])?;
    tape.broadcast_to(per_step, &[batch, steps, nodes, width])
}

/// Broadcasts a learned `(steps, nodes, width)` table across the batch axis.
/// Every window shares the same table regardless of its absolute position in
/// the series; the frame axis means "position within the window".
pub fn adaptive_embed(tape: &mut Tape, table: Var, batch: usize) -> Result<Var> {
    let shape = tape.shape(table).to_vec();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "adaptive_embed: expected a (steps, nodes, width) table, got {shape:?}"
        )));
    }
    let with_batch = tape.reshape(table, vec![1, shape[0], shape[1], shape[2]])?;
    tape.broadcast_to(with_batch, &[batch, shape[0], shape[1], shape[2]])
}

/// Broadcasts a learned `(nodes, width)` node-identity table across batch and
/// step axes: the time-blind replacement for [`adaptive_embed`].
pub fn node_embed(tape: &mut Tape, table: Var, batch: usize, steps: usize) -> Result<Var> {
    let shape = tape.shape(table).to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "node_embed: expected a (nodes, width) table, got {shape:?}"
        )));
    }
    let with_axes = tape.reshape(table, vec![1, 1, shape[0], shape[1]])?;
    tape.broadcast_to(with_axes, &[batch, steps, shape[0], shape[1]])
}

/// Concatenates embedding parts along the channel axis. The hidden width is
/// the sum of the part widths and the parts keep their argument order, so a
/// slice of the output recovers each source.
pub fn assemble(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    tape.concat_last(parts)
}
