mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use common::{harness, Scripted};
use urgentflow::IncidentId;
use urgentflow_service::sources::{Fetcher, FileFetcher};
use urgentflow_service::{DataSource, SourceMode};

fn poll_source(id: &str, incident: &str, interval: f64, dedup: Option<&str>) -> DataSource {
    DataSource {
        source_id: id.into(),
        mode: SourceMode::Poll,
        poll_interval: Some(interval),
        endpoint: format!("sensor://{id}"),
        target_queue: "qb".into(),
        incident_id: IncidentId::from(incident),
        dedup_key: dedup.map(str::to_string),
    }
}

const fn s(secs: u64) -> Duration {
    Duration::from_secs(secs)
}

#[tokio::test]
async fn repeated_dedup_value_yields_one_message() {
    let f = Arc::new(Scripted::default());
    let h = harness(None, Some(Arc::clone(&f)));
    let inc = h.active_incident().await;
    h.sources.register(poll_source("sensor", &inc, 5.0, Some("id")), s(0)).unwrap();
    f.queue("sensor", Ok(vec![br#"{"id":"a","v":1}"#.to_vec(), br#"{"id":"a","v":2}"#.to_vec()]));
    f.queue("sensor", Ok(vec![br#"{"id":"a","v":3}"#.to_vec(), br#"{"id":"b"}"#.to_vec()]));

    let t0 = h.sources.poll_sources(s(0));
    assert_eq!(t0.len(), 1);
    assert!(h.sources.poll_sources(s(4)).is_empty(), "not due before the interval");
    let t1 = h.sources.poll_sources(s(5));
    assert_eq!(t1.len(), 1);
    h.platform.engine.run_pending();
    assert_eq!(h.recorded("qb"), vec![br#"{"id":"a","v":1}"#.to_vec(), br#"{"id":"b"}"#.to_vec()]);
}

#[tokio::test]
async fn fetch_failure_backs_off_doubling_to_cap() {
    let f = Arc::new(Scripted::default());
    let h = harness(None, Some(Arc::clone(&f)));
    let inc = h.active_incident().await;
    h.sources.register(poll_source("flaky", &inc, 1.0, None), s(0)).unwrap();
    for _ in 0..5 {
        f.queue("flaky", Err("sensor offline".into()));
    }
    f.queue("flaky", Ok(vec![b"back".to_vec()]));

    // cap is 8 s in the harness: failures at 0, 2, 6, 14, 22 then success at 30
    let mut polled_at = Vec::new();
    for t in 0..=40 {
        let before = f.calls.lock().unwrap().len();
        let trig = h.sources.poll_sources(s(t));
        if f.calls.lock().unwrap().len() > before {
            polled_at.push(t);
        }
        if t < 30 {
            assert!(trig.is_empty());
        }
    }
    assert_eq!(&polled_at[..7], &[0, 2, 6, 14, 22, 30, 31]);
    let st = &h.sources.list()[0];
    assert_eq!(st.consecutive_failures, 0);
    h.platform.engine.run_pending();
    assert_eq!(h.recorded("qb"), vec![b"back".to_vec()]);
}

#[tokio::test]
async fn two_sources_on_one_queue_keep_arrival_order() {
    let f = Arc::new(Scripted::default());
    let h = harness(None, Some(Arc::clone(&f)));
    let inc = h.active_incident().await;
    h.sources.register(poll_source("north", &inc, 2.0, None), s(0)).unwrap();
    h.sources.register(poll_source("south", &inc, 3.0, None), s(0)).unwrap();
    let mut expected = Vec::new();
    let mut arrivals = Vec::new();
    for t in 0..12u64 {
        for (src, period) in [("north", 2), ("south", 3)] {
            if t % period == 0 {
                let p = format!("{src}@{t}").into_bytes();
                f.queue(src, Ok(vec![p.clone()]));
                expected.push(p);
            }
        }
        arrivals.extend(h.sources.poll_sources(s(t)));
    }
    let ids: Vec<_> = arrivals.iter().map(|a| a.message_id).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    h.platform.engine.run_pending();
    assert_eq!(h.recorded("qb"), expected);
}

#[test]
fn file_fetcher_reads_only_new_complete_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feed.jsonl");
    std::fs::write(&path, "one\n\ntwo\npart").unwrap();
    let src = DataSource {
        source_id: "f".into(),
        mode: SourceMode::Poll,
        poll_interval: Some(1.0),
        endpoint: path.display().to_string(),
        target_queue: "qb".into(),
        incident_id: IncidentId::from("inc-1"),
        dedup_key: None,
    };
    let f = FileFetcher::default();
    assert_eq!(f.fetch(&src).unwrap(), vec![b"one".to_vec(), b"two".to_vec()]);
    assert!(f.fetch(&src).unwrap().is_empty());
    let mut file = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    file.write_all(b"ial\nthree\r\n").unwrap();
    assert_eq!(f.fetch(&src).unwrap(), vec![b"partial".to_vec(), b"three".to_vec()]);

    let missing = DataSource {
        endpoint: dir.path().join("absent").display().to_string(),
        ..src
    };
    assert!(f.fetch(&missing).is_err());
}
