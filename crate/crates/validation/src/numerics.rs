//! Criteria 1-3: connectivity, gradients, parallel invariance.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use farskip_core::check::{
    check_all_ops, check_connectivity, check_model_all_modes, ep_invariance_error, random_small_config,
    tp_identity_error, GradCheck,
};

use crate::{err, timed, Verdict};

pub fn connectivity() -> Verdict {
    timed(1, "connectivity correctness", Some(Duration::from_secs(60)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
        let mut failures = Vec::new();
        for i in 0..100u64 {
            let cfg = random_small_config(&mut rng);
            let c = check_connectivity(&cfg, i).map_err(err)?;
            if !c.passed() {
                failures.push(format!("config {i}: {c:?}"));
            }
        }
        let detail = match failures.first() {
            None => "100/100 configs: regular == reference bitwise, hybrid identity exact".into(),
            Some(f) => format!("{} of 100 failed; first {f}", failures.len()),
        };
        Ok((failures.is_empty(), detail))
    })
}

pub fn gradients() -> Verdict {
    timed(2, "gradient suite", Some(Duration::from_secs(300)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9ad);
        let mut checks = Vec::new();
        for i in 0..20u64 {
            for (name, c) in check_all_ops(i).map_err(err)? {
                checks.push((format!("op {name} seed {i}"), c));
            }
            let cfg = random_small_config(&mut rng);
            for (mode, c) in check_model_all_modes(&cfg, i).map_err(err)? {
                checks.push((format!("model {mode:?} config {i}"), c));
            }
        }
        let failed: Vec<&(String, GradCheck)> = checks.iter().filter(|(_, c)| !c.passed()).collect();
        let n = checks.iter().map(|(_, c)| c.n_checked).sum::<usize>();
        let all = GradCheck::merged(checks.iter().map(|(_, c)| c.clone()));
        let detail = match failed.first() {
            None => format!("{n} partials over 20 configs x 4 modes plus every op; max rel err {:.2e}", all.max_rel_err),
            Some((label, c)) => format!("{} checks failed; {label}: {:.2e} at {}", failed.len(), c.max_rel_err, c.worst),
        };
        Ok((failed.is_empty(), detail))
    })
}

pub fn parallel_invariance() -> Verdict {
    timed(3, "EP/TP functional invariance", None, || {
        let mut ep = 0.0f64;
        let mut tp = 0.0f64;
        for seed in 0..10 {
            ep = ep.max(ep_invariance_error(seed).map_err(err)?);
            tp = tp.max(tp_identity_error(seed).map_err(err)?);
        }
        let passed = ep <= 1e-12 && tp <= 1e-12;
        Ok((passed, format!("max |EP(n) - EP(1)| = {ep:.1e} for n in 2,4,8; max TP shard error {tp:.1e}")))
    })
}
