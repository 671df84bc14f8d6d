#![no_main]
use libfuzzer_sys::fuzz_target;
use urgentflow::runner::parse_workflow;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(wf) = parse_workflow(text) {
        // accepted workflows are acyclic, so the order covers every step
        let order = wf.topo_order().expect("accepted workflow has an order");
        assert_eq!(order.len(), wf.steps.len());
    }
});
