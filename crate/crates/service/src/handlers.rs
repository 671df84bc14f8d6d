//! Handler symbols available to kind manifests loaded by the server.

use urgentflow::engine::HandlerRegistry;

/// Key under which `record` appends payloads for a stage.
pub fn record_key(stage: &str) -> String {
    format!("record:{stage}")
}

/// `noop` does nothing; `record` appends each payload plus a newline to the
/// incident's key-value store under [`record_key`]; `fail` always errors.
pub fn builtin_handlers() -> HandlerRegistry {
    let mut reg = HandlerRegistry::new();
    reg.register("noop", |_| Ok(()));
    reg.register("record", |ctx| {
        let key = record_key(ctx.stage_name());
        let mut log = ctx.kv_get(&key).unwrap_or_default();
        log.extend_from_slice(ctx.payload());
        log.push(b'\n');
        ctx.kv_put(&key, log)?;
        Ok(())
    });
    reg.register("fail", |ctx| Err(format!("stage {} always fails", ctx.stage_name()).into()));
    reg
}
