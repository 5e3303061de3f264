//! Small instances shipped with the crate, each in a discounted (`gamma = 0.6`)
//! and an episodic (`H = 3`) variant.
//!
//! - `twin`: `d = 2`, 3 states, 2 actions; the two feature directions carry
//!   high and low reward and states mix them.
//! - `switch`: tabular, 2 states, 2 actions, deterministic rewards and
//!   transitions (action `a` moves to state `a`), gap 1.
//! - `ring`: `d = 3`, 6 states, 3 actions with rotated features.

use crate::error::{Error, Result};
use crate::mdp::{parse_instance, InstanceMode, LinearMdp};

pub const BUNDLED_NAMES: [&str; 3] = ["twin", "switch", "ring"];

fn source(name: &str, mode: InstanceMode) -> Option<&'static str> {
    Some(match (name, mode) {
        ("twin", InstanceMode::Discounted) => include_str!("../instances/twin.json"),
        ("twin", InstanceMode::Episodic) => include_str!("../instances/twin_episodic.json"),
        ("switch", InstanceMode::Discounted) => include_str!("../instances/switch.json"),
        ("switch", InstanceMode::Episodic) => include_str!("../instances/switch_episodic.json"),
        ("ring", InstanceMode::Discounted) => include_str!("../instances/ring.json"),
        ("ring", InstanceMode::Episodic) => include_str!("../instances/ring_episodic.json"),
        _ => return None,
    })
}

pub fn bundled_instance(name: &str, mode: InstanceMode) -> Result<LinearMdp> {
    let json = source(name, mode)
        .ok_or_else(|| Error::InvalidConfig(format!("no bundled instance named {name:?}")))?;
    parse_instance(json)
}

/// Parses a `name` or `name:episodic` reference to a bundled instance.
pub fn resolve_bundled(reference: &str) -> Result<LinearMdp> {
    let (name, mode) = match reference.split_once(':') {
        Some((n, "episodic")) => (n, InstanceMode::Episodic),
        Some((n, "discounted")) | Some((n, "")) => (n, InstanceMode::Discounted),
        Some((_, m)) => return Err(Error::InvalidConfig(format!("unknown mode {m:?}"))),
        None => (reference, InstanceMode::Discounted),
    };
    bundled_instance(name, mode)
}
