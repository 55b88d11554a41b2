#![no_main]

use farskip_sim::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(scenario) = Scenario::from_json(text) else { return };
    if let Ok((n_layers, _)) = scenario.resolve() {
        // keep simulated graphs small enough for the fuzzer's time budget
        if n_layers <= 64 && scenario.ep_sweep.len() <= 4 {
            let _ = scenario.run();
        }
    }
});
