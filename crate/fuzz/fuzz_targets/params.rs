#![no_main]
use libfuzzer_sys::fuzz_target;
use urgentflow::runner::{parse_parameters, Provenance};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for prov in [Provenance::Scenario, Provenance::Machine] {
        if let Ok(set) = parse_parameters(text, prov) {
            assert_eq!(set.provenance, prov);
        }
    }
});
