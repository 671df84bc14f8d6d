//! OpenAPI description of the routes in [`crate::api`]. `docs/openapi.json`
//! is this document, pretty-printed; a test keeps the two in sync.

use serde_json::{json, Value};

fn error_responses(codes: &[&str]) -> Value {
    let mut map = serde_json::Map::new();
    for code in codes {
        let description = match *code {
            "400" => "validation error",
            "401" => "missing or wrong API key",
            "404" => "unknown id",
            "409" => "invalid state transition",
            _ => "error",
        };
        map.insert(
            code.to_string(),
            json!({
                "description": description,
                "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } }
            }),
        );
    }
    Value::Object(map)
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

fn json_body(schema: &str) -> Value {
    json!({
        "required": true,
        "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } }
    })
}

fn json_response(description: &str, schema: Value) -> Value {
    json!({ "description": description, "content": { "application/json": { "schema": schema } } })
}

fn schema_ref(name: &str) -> Value {
    json!({ "$ref": format!("#/components/schemas/{name}") })
}

fn id_param(name: &str) -> Value {
    json!([{ "name": name, "in": "path", "required": true, "schema": { "type": "string" } }])
}

pub fn document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": {
            "title": "urgentflow service API",
            "version": env!("CARGO_PKG_VERSION"),
            "description": "Incident lifecycle management and external data ingestion. Every request must carry the x-api-key header when the server is started with a key."
        },
        "components": {
            "securitySchemes": {
                "apiKey": { "type": "apiKey", "in": "header", "name": "x-api-key" }
            },
            "schemas": {
                "Error": {
                    "type": "object",
                    "required": ["error"],
                    "properties": { "error": { "type": "string" } }
                },
                "CreateIncident": {
                    "type": "object",
                    "required": ["name", "kind"],
                    "properties": { "name": { "type": "string" }, "kind": { "type": "string" } }
                },
                "Created": {
                    "type": "object",
                    "required": ["incident_id"],
                    "properties": { "incident_id": { "type": "string" } }
                },
                "Incident": {
                    "type": "object",
                    "properties": {
                        "incident_id": { "type": "string" },
                        "name": { "type": "string" },
                        "kind": { "type": "string" },
                        "state": { "type": "string", "enum": ["PENDING", "ACTIVE", "COMPLETE", "CANCELLED"] },
                        "created_at": { "type": "string", "format": "date-time" },
                        "stage_bindings": { "type": "object", "additionalProperties": { "type": "string" } },
                        "associated_simulation_ids": { "type": "array", "items": { "type": "string" } },
                        "associated_data_ids": { "type": "array", "items": { "type": "string" } },
                        "kv_store": {
                            "type": "object",
                            "description": "values are base64",
                            "additionalProperties": { "type": "string" }
                        }
                    }
                },
                "IncidentView": {
                    "allOf": [
                        schema_ref("Incident"),
                        {
                            "type": "object",
                            "properties": {
                                "simulations": { "type": "array", "items": schema_ref("Simulation") },
                                "data_items": { "type": "array", "items": schema_ref("DataItem") }
                            }
                        }
                    ]
                },
                "SendMessage": {
                    "type": "object",
                    "required": ["queue"],
                    "properties": {
                        "queue": { "type": "string" },
                        "payload": {
                            "description": "a string is delivered as its UTF-8 bytes, any other JSON value as its JSON text"
                        }
                    }
                },
                "Accepted": {
                    "type": "object",
                    "properties": {
                        "message_id": {
                            "type": "integer",
                            "nullable": true,
                            "description": "null when a pushed payload repeated a dedup value"
                        }
                    }
                },
                "MessageRecord": {
                    "type": "object",
                    "properties": {
                        "message_id": { "type": "integer" },
                        "queue_name": { "type": "string" },
                        "incident_id": { "type": "string" },
                        "payload": { "type": "string", "description": "base64" },
                        "originator": { "type": "string" },
                        "enqueue_seq": { "type": "integer" },
                        "status": { "type": "string", "enum": ["QUEUED", "RUNNING", "COMPLETED", "FAILED", "DISCARDED"] },
                        "error": { "type": "string" }
                    }
                },
                "Simulation": {
                    "type": "object",
                    "properties": {
                        "sim_id": { "type": "string" },
                        "incident_id": { "type": "string" },
                        "requested_cores": { "type": "integer" },
                        "nodes": { "type": "integer" },
                        "walltime_limit": { "type": "number", "description": "seconds" },
                        "description": { "type": "string" },
                        "submit_script": { "type": "string" },
                        "machine_name": { "type": "string" },
                        "directory": { "type": "string" },
                        "status": {
                            "type": "string",
                            "enum": ["CREATED", "QUEUED", "RUNNING", "COMPLETED", "ERROR", "CANCELLED"]
                        },
                        "callbacks": { "type": "object", "additionalProperties": { "type": "string" } },
                        "job_id": { "type": "integer", "nullable": true },
                        "timestamps": { "type": "object", "additionalProperties": { "type": "number" } },
                        "deferred": { "type": "boolean" },
                        "detail": { "type": "string" }
                    }
                },
                "DataItem": {
                    "type": "object",
                    "properties": {
                        "data_id": { "type": "string" },
                        "name": { "type": "string" },
                        "machine_name": { "type": "string" },
                        "path": { "type": "string" },
                        "description": { "type": "string" },
                        "mime_type": { "type": "string" },
                        "size_bytes": { "type": "integer" },
                        "incident_id": { "type": "string" },
                        "created_at": { "type": "string", "format": "date-time" }
                    }
                },
                "DataSource": {
                    "type": "object",
                    "required": ["source_id", "mode", "target_queue", "incident_id"],
                    "properties": {
                        "source_id": { "type": "string" },
                        "mode": { "type": "string", "enum": ["POLL", "PUSH"] },
                        "poll_interval": { "type": "number", "description": "seconds, POLL only, > 0" },
                        "endpoint": { "type": "string", "description": "file polled for new lines (POLL)" },
                        "target_queue": { "type": "string" },
                        "incident_id": { "type": "string" },
                        "dedup_key": { "type": "string", "description": "JSON field whose repeated values are dropped" }
                    }
                },
                "SourceStatus": {
                    "allOf": [
                        schema_ref("DataSource"),
                        {
                            "type": "object",
                            "properties": {
                                "next_due": { "type": "number" },
                                "consecutive_failures": { "type": "integer" }
                            }
                        }
                    ]
                }
            }
        },
        "security": [{ "apiKey": [] }],
        "paths": {
            "/openapi.json": {
                "get": {
                    "summary": "This document",
                    "responses": merge(
                        json!({ "200": { "description": "OpenAPI document" } }),
                        error_responses(&["401"])
                    )
                }
            },
            "/kinds": {
                "get": {
                    "summary": "Registered workflow kinds",
                    "responses": merge(
                        json!({ "200": json_response("kind names", json!({ "type": "array", "items": { "type": "string" } })) }),
                        error_responses(&["401"])
                    )
                }
            },
            "/incidents": {
                "post": {
                    "summary": "Create an incident in PENDING",
                    "requestBody": json_body("CreateIncident"),
                    "responses": merge(
                        json!({ "201": json_response("created", schema_ref("Created")) }),
                        error_responses(&["400", "401"])
                    )
                },
                "get": {
                    "summary": "All incidents",
                    "responses": merge(
                        json!({ "200": json_response("incidents", json!({ "type": "array", "items": schema_ref("Incident") })) }),
                        error_responses(&["401"])
                    )
                }
            },
            "/incidents/{id}": {
                "parameters": id_param("id"),
                "get": {
                    "summary": "Incident with its simulations and data items",
                    "responses": merge(
                        json!({ "200": json_response("incident", schema_ref("IncidentView")) }),
                        error_responses(&["401", "404"])
                    )
                },
                "delete": {
                    "summary": "Cancel the incident and its unfinished simulations",
                    "responses": merge(
                        json!({ "204": { "description": "cancelled" } }),
                        error_responses(&["401", "404", "409"])
                    )
                }
            },
            "/incidents/{id}/activate": {
                "parameters": id_param("id"),
                "post": {
                    "summary": "Activate a PENDING incident; the entry stage runs once",
                    "responses": merge(
                        json!({ "204": { "description": "activated" } }),
                        error_responses(&["401", "404", "409"])
                    )
                }
            },
            "/incidents/{id}/complete": {
                "parameters": id_param("id"),
                "post": {
                    "summary": "Mark an ACTIVE incident complete",
                    "responses": merge(
                        json!({ "204": { "description": "completed" } }),
                        error_responses(&["401", "404", "409"])
                    )
                }
            },
            "/incidents/{id}/messages": {
                "parameters": id_param("id"),
                "post": {
                    "summary": "Send a message to one of the incident's queues",
                    "requestBody": json_body("SendMessage"),
                    "responses": merge(
                        json!({ "202": json_response("queued", schema_ref("Accepted")) }),
                        error_responses(&["400", "401", "404", "409"])
                    )
                },
                "get": {
                    "summary": "Messages of the incident with their dispatch status",
                    "responses": merge(
                        json!({ "200": json_response("messages", json!({ "type": "array", "items": schema_ref("MessageRecord") })) }),
                        error_responses(&["401", "404"])
                    )
                }
            },
            "/simulations/{id}": {
                "parameters": id_param("id"),
                "get": {
                    "summary": "Simulation record",
                    "responses": merge(
                        json!({ "200": json_response("simulation", schema_ref("Simulation")) }),
                        error_responses(&["401", "404"])
                    )
                }
            },
            "/sources": {
                "post": {
                    "summary": "Register a POLL or PUSH data source",
                    "requestBody": json_body("DataSource"),
                    "responses": merge(
                        json!({ "201": json_response("registered", schema_ref("DataSource")) }),
                        error_responses(&["400", "401", "404", "409"])
                    )
                },
                "get": {
                    "summary": "Registered data sources",
                    "responses": merge(
                        json!({ "200": json_response("sources", json!({ "type": "array", "items": schema_ref("SourceStatus") })) }),
                        error_responses(&["401"])
                    )
                }
            },
            "/sources/{id}": {
                "parameters": id_param("id"),
                "delete": {
                    "summary": "Remove a data source",
                    "responses": merge(
                        json!({ "204": { "description": "removed" } }),
                        error_responses(&["401", "404"])
                    )
                }
            },
            "/data/push/{source_id}": {
                "parameters": id_param("source_id"),
                "post": {
                    "summary": "Push one payload through a PUSH source; the raw body is the payload",
                    "requestBody": {
                        "required": true,
                        "content": { "application/octet-stream": { "schema": { "type": "string", "format": "binary" } } }
                    },
                    "responses": merge(
                        json!({ "202": json_response("accepted", schema_ref("Accepted")) }),
                        error_responses(&["401", "404", "409"])
                    )
                }
            }
        }
    })
}

/// The document as written to `docs/openapi.json`.
pub fn pretty() -> String {
    let mut s = serde_json::to_string_pretty(&document()).expect("document serializes");
    s.push('\n');
    s
}
