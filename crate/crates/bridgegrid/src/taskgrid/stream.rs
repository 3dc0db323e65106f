//! Micro-batch streaming: a source yields a topic-init record followed by
//! batches of topic-tagged records; the driver builds one dataset per
//! topic, unions them, and hands each batch to the handler strictly in
//! order, one at a time.
//!
//! Replay file format: newline-delimited records `topic<TAB>base64(payload)`.
//! The literal line `__init__` is the topic-init marker; a blank line
//! closes the current micro-batch (an empty section is an empty batch).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Serialize;

use super::{Dataset, TaskError};

/// The topic-init marker line.
pub const INIT_RECORD: &str = "__init__";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroBatch {
    pub batch_index: u64,
    pub topics: BTreeMap<String, Vec<Vec<u8>>>,
}

impl MicroBatch {
    pub fn record_count(&self) -> usize {
        self.topics.values().map(Vec::len).sum()
    }

    /// One single-partition dataset per topic, unioned in topic order.
    pub fn to_dataset(&self) -> Dataset {
        let mut out = Dataset::empty(0);
        for records in self.topics.values() {
            let per_topic = Dataset::from_partitions(vec![records.clone()]);
            out = out.union(&per_topic);
        }
        out
    }
}

/// Where micro-batches come from: a replay file or an in-memory sequence.
/// `interval` paces batch delivery.
#[derive(Debug, Clone)]
pub enum StreamSource {
    Replay {
        path: std::path::PathBuf,
        interval: Duration,
    },
    Batches {
        batches: Vec<MicroBatch>,
        interval: Duration,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub batch_index: u64,
    pub topics: usize,
    pub records: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StreamReport {
    pub batches: Vec<BatchSummary>,
}

/// Parse a replay file into batches. Records before the topic-init line
/// are ignored (the driver is still waiting); a missing init marker is an
/// error since a finite replay would otherwise wait forever.
pub fn parse_replay_file(path: &Path) -> Result<Vec<MicroBatch>, TaskError> {
    let text = std::fs::read_to_string(path)?;
    let mut initialized = false;
    let mut batches: Vec<MicroBatch> = Vec::new();
    let mut current: BTreeMap<String, Vec<Vec<u8>>> = BTreeMap::new();
    let mut current_open = false;

    for (lineno, line) in text.lines().enumerate() {
        if !initialized {
            if line.trim() == INIT_RECORD {
                initialized = true;
            }
            continue;
        }
        if line.trim().is_empty() {
            batches.push(MicroBatch {
                batch_index: batches.len() as u64,
                topics: std::mem::take(&mut current),
            });
            current_open = false;
            continue;
        }
        let (topic, payload) = line.split_once('\t').ok_or_else(|| {
            TaskError::StreamFormat(format!("line {}: expected topic<TAB>base64", lineno + 1))
        })?;
        let payload = BASE64.decode(payload.trim()).map_err(|e| {
            TaskError::StreamFormat(format!("line {}: bad base64: {e}", lineno + 1))
        })?;
        current.entry(topic.to_string()).or_default().push(payload);
        current_open = true;
    }
    if !initialized {
        return Err(TaskError::StreamFormat(
            "replay file has no __init__ topic-init record".into(),
        ));
    }
    if current_open {
        batches.push(MicroBatch {
            batch_index: batches.len() as u64,
            topics: current,
        });
    }
    Ok(batches)
}

/// Serialize batches into the replay format, starting with the init
/// marker.
pub fn write_replay_file(path: &Path, batches: &[MicroBatch]) -> Result<(), TaskError> {
    let mut out = String::new();
    out.push_str(INIT_RECORD);
    out.push('\n');
    for (i, batch) in batches.iter().enumerate() {
        for (topic, records) in &batch.topics {
            for record in records {
                out.push_str(topic);
                out.push('\t');
                out.push_str(&BASE64.encode(record));
                out.push('\n');
            }
        }
        if i + 1 < batches.len() || batch.topics.is_empty() {
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Drive the stream: waits for topic-init, then processes each batch in
/// order with `run_batch(batch_index, dataset)`. A handler error stops
/// the stream.
pub fn stream_run(
    source: &StreamSource,
    mut run_batch: impl FnMut(u64, &Dataset) -> Result<(), String>,
) -> Result<StreamReport, TaskError> {
    let (batches, interval) = match source {
        StreamSource::Replay { path, interval } => (parse_replay_file(path)?, *interval),
        StreamSource::Batches { batches, interval } => (batches.clone(), *interval),
    };
    let mut report = StreamReport::default();
    for (i, batch) in batches.iter().enumerate() {
        if i > 0 && !interval.is_zero() {
            std::thread::sleep(interval);
        }
        let dataset = batch.to_dataset();
        run_batch(batch.batch_index, &dataset).map_err(|message| TaskError::HandlerFailed {
            batch_index: batch.batch_index,
            message,
        })?;
        report.batches.push(BatchSummary {
            batch_index: batch.batch_index,
            topics: batch.topics.len(),
            records: batch.record_count(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(index: u64, topics: &[(&str, usize)]) -> MicroBatch {
        MicroBatch {
            batch_index: index,
            topics: topics
                .iter()
                .map(|(t, n)| {
                    (
                        t.to_string(),
                        (0..*n).map(|i| format!("{t}{i}").into_bytes()).collect(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn replay_roundtrip_with_empty_batch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.txt");
        let batches = vec![
            batch(0, &[("alpha", 2), ("beta", 1)]),
            batch(1, &[]),
            batch(2, &[("alpha", 3)]),
        ];
        write_replay_file(&path, &batches).unwrap();
        let parsed = parse_replay_file(&path).unwrap();
        assert_eq!(parsed, batches);
    }

    #[test]
    fn records_before_init_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.txt");
        std::fs::write(
            &path,
            "noise\tAAAA\n__init__\nalpha\tAA==\n",
        )
        .unwrap();
        let parsed = parse_replay_file(&path).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].topics["alpha"], vec![vec![0u8]]);
    }

    #[test]
    fn missing_init_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.txt");
        std::fs::write(&path, "alpha\tAA==\n").unwrap();
        assert!(matches!(
            parse_replay_file(&path),
            Err(TaskError::StreamFormat(_))
        ));
    }

    #[test]
    fn batches_arrive_in_order_and_topics_partition_the_dataset() {
        let batches = vec![batch(0, &[("a", 3), ("b", 3)]), batch(1, &[("a", 1)])];
        let source = StreamSource::Batches {
            batches,
            interval: Duration::ZERO,
        };
        let mut seen = Vec::new();
        let report = stream_run(&source, |idx, dataset| {
            seen.push(idx);
            if idx == 0 {
                assert_eq!(dataset.num_partitions(), 2, "one partition per topic");
                assert_eq!(dataset.total_records(), 6);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(report.batches.len(), 2);
    }

    #[test]
    fn empty_batch_still_invokes_handler() {
        let source = StreamSource::Batches {
            batches: vec![batch(0, &[])],
            interval: Duration::ZERO,
        };
        let mut calls = 0;
        stream_run(&source, |_, dataset| {
            calls += 1;
            assert_eq!(dataset.total_records(), 0);
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 1);
    }

    #[test]
    fn handler_failure_stops_the_stream() {
        let source = StreamSource::Batches {
            batches: vec![batch(0, &[("a", 1)]), batch(1, &[("a", 1)])],
            interval: Duration::ZERO,
        };
        let mut calls = 0;
        let err = stream_run(&source, |idx, _| {
            calls += 1;
            if idx == 0 {
                Err("boom".to_string())
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        match err {
            TaskError::HandlerFailed { batch_index: 0, .. } => {}
            other => panic!("expected HANDLER_FAILED, got {other:?}"),
        }
        assert_eq!(calls, 1, "stream stops at the failing batch");
    }
}
