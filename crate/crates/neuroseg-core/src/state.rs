//! Named-parameter plumbing shared by model blocks.
//!
//! Blocks expose their tensors as (name, shape, values) triples in a
//! fixed canonical order so checkpoints serialize deterministically and
//! load back by name.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{shape_string, Scalar};

/// One serializable tensor: name, shape, row-major values.
pub type StateEntry<T> = (String, Vec<usize>, Vec<T>);

/// Loaded checkpoint contents keyed by entry name.
pub type StateMap<T> = BTreeMap<String, (Vec<usize>, Vec<T>)>;

/// Removes `name` from `map`, insisting on the expected shape.
pub fn take_entry<T: Scalar>(
    map: &mut StateMap<T>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<T>> {
    let (got_shape, data) = map
        .remove(name)
        .ok_or_else(|| CoreError::data(format!("checkpoint is missing entry {name}")))?;
    if got_shape != shape {
        return Err(CoreError::data(format!(
            "entry {name} has shape {}, expected {}",
            shape_string(&got_shape),
            shape_string(shape)
        )));
    }
    Ok(data)
}
