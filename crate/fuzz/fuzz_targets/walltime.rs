#![no_main]
use libfuzzer_sys::fuzz_target;
use urgentflow::walltime::{format_walltime, parse_walltime};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(d) = parse_walltime(text) {
        assert_eq!(parse_walltime(&format_walltime(d)).ok(), Some(d));
    }
});
