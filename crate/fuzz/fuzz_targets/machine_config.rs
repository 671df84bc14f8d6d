#![no_main]
use libfuzzer_sys::fuzz_target;
use urgentflow::machine::parse_machine_configs;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(configs) = parse_machine_configs(text) {
        for c in configs {
            assert!(c.num_nodes > 0 && c.cores_per_node > 0);
        }
    }
});
