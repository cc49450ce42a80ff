//! Compact policy strings for `stac compare`:
//!
//! ```text
//! full
//! window-8        window:8
//! stac            stac:budget=20,split=0.2/0.8/0,window=4,gamma=0.9
//! ```
//!
//! Recognised stac keys: `budget`, `split`, `window`, `gamma`, `lambda`,
//! `voxel`, `gcap`, `ecap`, `knn`, `chunk`, `half`. `chunk=` is accepted by
//! every policy.

use stac_core::{CacheConfig, Policy, PolicyKind};

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value for {key}: '{v}'"))
}

pub fn parse_split(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split([',', '/']).map(str::trim).collect();
    match parts.as_slice() {
        [w, a, r] => Ok((num("split", w)?, num("split", a)?, num("split", r)?)),
        _ => Err(format!("split needs three fractions w,a,r, got '{s}'")),
    }
}

pub fn parse_policy(spec: &str) -> Result<Policy, String> {
    let spec = spec.trim();
    let (name, rest) = match spec.split_once(':') {
        Some((n, r)) => (n, Some(r)),
        None => (spec, None),
    };
    // window-8 is shorthand for window:8
    let (name, rest) = match name.strip_prefix("window-") {
        Some(w) if rest.is_none() => ("window", Some(w)),
        _ => (name, rest),
    };
    let kind: PolicyKind = name.parse()?;
    let mut policy = match kind {
        PolicyKind::Full => Policy::full(),
        PolicyKind::Window => Policy::window(CacheConfig::default().window_frames),
        PolicyKind::Stac => Policy::stac(CacheConfig::default()),
    };
    let Some(rest) = rest.filter(|r| !r.is_empty()) else {
        return Ok(policy);
    };
    let cfg = &mut policy.config;
    for item in rest.split(',') {
        let (key, value) = match item.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None if kind == PolicyKind::Window => ("window", item.trim()),
            None if item.trim() == "half" => ("half", "true"),
            None => return Err(format!("expected key=value, got '{item}'")),
        };
        match (kind, key) {
            (_, "chunk") => cfg.chunk_size = num(key, value)?,
            (PolicyKind::Window, "window") => cfg.window_frames = num(key, value)?,
            (PolicyKind::Stac, "window") => cfg.window_frames = num(key, value)?,
            (PolicyKind::Stac, "budget") => cfg.budget_multiplier = num(key, value)?,
            (PolicyKind::Stac, "split") => {
                (cfg.window_frac, cfg.anchor_frac, cfg.retrieve_frac) = parse_split(value)?;
            }
            (PolicyKind::Stac, "gamma") => cfg.gamma = num(key, value)?,
            (PolicyKind::Stac, "lambda") => cfg.lambda = num(key, value)?,
            (PolicyKind::Stac, "voxel") => cfg.voxel_size = num(key, value)?,
            (PolicyKind::Stac, "gcap") => cfg.g_cap = num(key, value)?,
            (PolicyKind::Stac, "ecap") => cfg.e_cap = num(key, value)?,
            (PolicyKind::Stac, "knn") => cfg.knn_radius_mult = num(key, value)?,
            (PolicyKind::Stac, "half") => cfg.half_precision = num(key, value)?,
            _ => return Err(format!("'{key}' is not a parameter of the {kind} policy")),
        }
    }
    Ok(policy)
}
