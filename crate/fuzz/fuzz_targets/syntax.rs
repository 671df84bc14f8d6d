#![no_main]
use libfuzzer_sys::fuzz_target;
use urgentflow::syntax::{parse_document, parse_documents};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let single = parse_document(text);
    let many = parse_documents(text);
    // a stream that parses as one document must also parse as a stream
    if single.is_ok() {
        assert!(many.is_ok());
    }
});
