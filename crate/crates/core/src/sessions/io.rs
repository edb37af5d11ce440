use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LatentTrace, Session, TrialEvent};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const EEG_FILE: &str = "eeg.f64le";
pub const EVENTS_FILE: &str = "events.csv";
pub const LATENT_FILE: &str = "latent.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMeta {
    pub subject_id: String,
    pub fs_hz: f64,
    pub n_channels: usize,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SessionMeta {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.fs_hz).round() as usize
    }
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    event_onset_s: f64,
    response_onset_s: f64,
    response_offset_s: f64,
}

#[derive(Serialize, Deserialize)]
struct LatentRow {
    t_s: f64,
    d: f64,
    latent_rt_s: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn save_session(session: &Session, dir: &Path) -> Result<()> {
    session.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SessionMeta {
        subject_id: session.subject_id.clone(),
        fs_hz: session.fs,
        n_channels: session.n_channels,
        duration_s: session.duration_s,
        seed: session.seed,
    };
    if meta.n_samples() != session.n_samples() {
        return Err(Error::InvalidArgument(format!(
            "session holds {} samples per channel, duration x fs implies {}",
            session.n_samples(),
            meta.n_samples()
        )));
    }
    write_json(&dir.join(META_FILE), &meta)?;

    let mut blob = Vec::with_capacity(session.eeg.len() * 8);
    for v in &session.eeg {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let eeg_path = dir.join(EEG_FILE);
    fs::write(&eeg_path, blob).map_err(|e| Error::io(&eeg_path, e))?;

    let ev_path = dir.join(EVENTS_FILE);
    let mut w = csv::Writer::from_path(&ev_path).map_err(|e| csv_err(&ev_path, e))?;
    if session.events.is_empty() {
        w.write_record(["event_onset_s", "response_onset_s", "response_offset_s"])
            .map_err(|e| csv_err(&ev_path, e))?;
    }
    for ev in &session.events {
        w.serialize(EventRow {
            event_onset_s: ev.event_onset,
            response_onset_s: ev.response_onset,
            response_offset_s: ev.response_offset,
        })
        .map_err(|e| csv_err(&ev_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&ev_path, e))?;
    Ok(())
}

pub fn load_session(dir: &Path) -> Result<Session> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SessionMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if !(meta.fs_hz > 0.0) || meta.n_channels == 0 || !(meta.duration_s > 0.0) {
        return Err(Error::format(
            &meta_path,
            "fs_hz, n_channels and duration_s must be positive",
        ));
    }

    let eeg_path = dir.join(EEG_FILE);
    let blob = fs::read(&eeg_path).map_err(|e| Error::io(&eeg_path, e))?;
    let expected = meta.n_channels * meta.n_samples() * 8;
    if blob.len() != expected {
        return Err(Error::format(
            &eeg_path,
            format!("expected {expected} bytes, found {}", blob.len()),
        ));
    }
    let eeg = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();

    let ev_path = dir.join(EVENTS_FILE);
    let mut rdr = csv::Reader::from_path(&ev_path).map_err(|e| csv_err(&ev_path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(&ev_path, e))?.clone();
    if headers != csv::StringRecord::from(vec!["event_onset_s", "response_onset_s", "response_offset_s"]) {
        return Err(Error::format(&ev_path, format!("unexpected header {headers:?}")));
    }
    let mut events = Vec::new();
    for (line, row) in rdr.deserialize::<EventRow>().enumerate() {
        let row = row.map_err(|e| csv_err(&ev_path, e))?;
        let ev = TrialEvent {
            event_onset: row.event_onset_s,
            response_onset: row.response_onset_s,
            response_offset: row.response_offset_s,
        };
        ev.validate()
            .map_err(|e| Error::format(&ev_path, format!("row {}: {e}", line + 1)))?;
        events.push(ev);
    }

    let session = Session {
        subject_id: meta.subject_id,
        fs: meta.fs_hz,
        n_channels: meta.n_channels,
        eeg,
        events,
        duration_s: meta.duration_s,
        seed: meta.seed,
    };
    session
        .validate()
        .map_err(|e| Error::format(&ev_path, e.to_string()))?;
    Ok(session)
}

pub fn save_latent(latent: &LatentTrace, dir: &Path) -> Result<()> {
    let path = dir.join(LATENT_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for (i, (&d, &rt)) in latent.d.iter().zip(&latent.rt).enumerate() {
        w.serialize(LatentRow {
            t_s: i as f64,
            d,
            latent_rt_s: rt,
        })
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_latent(dir: &Path) -> Result<LatentTrace> {
    let path = dir.join(LATENT_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut d = Vec::new();
    let mut rt = Vec::new();
    for (i, row) in rdr.deserialize::<LatentRow>().enumerate() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        if row.t_s != i as f64 {
            return Err(Error::format(&path, format!("row {} has t_s {}", i + 1, row.t_s)));
        }
        d.push(row.d);
        rt.push(row.latent_rt_s);
    }
    Ok(LatentTrace { d, rt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Session {
        Session {
            subject_id: "s01".into(),
            fs: 4.0,
            n_channels: 2,
            eeg: (0..2 * 80).map(|i| (i as f64).sin() * 1e-3 + 0.1).collect(),
            events: vec![
                TrialEvent {
                    event_onset: 1.25,
                    response_onset: 2.0 + 1.0 / 3.0,
                    response_offset: 3.0,
                },
                TrialEvent {
                    event_onset: 7.0,
                    response_onset: 8.5,
                    response_offset: 9.1,
                },
            ],
            duration_s: 20.0,
            seed: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny();
        save_session(&s, dir.path()).unwrap();
        assert_eq!(load_session(dir.path()).unwrap(), s);
    }

    #[test]
    fn truncated_blob_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        save_session(&tiny(), dir.path()).unwrap();
        let p = dir.path().join(EEG_FILE);
        let mut blob = fs::read(&p).unwrap();
        blob.truncate(blob.len() - 8);
        fs::write(&p, blob).unwrap();
        let msg = load_session(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("expected 1280 bytes, found 1272"), "{msg}");
    }

    #[test]
    fn inverted_response_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_session(&tiny(), dir.path()).unwrap();
        fs::write(
            dir.path().join(EVENTS_FILE),
            "event_onset_s,response_onset_s,response_offset_s\n5.0,4.0,6.0\n",
        )
        .unwrap();
        let msg = load_session(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("row 1"), "{msg}");
    }

    #[test]
    fn unknown_meta_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_session(&tiny(), dir.path()).unwrap();
        fs::write(
            dir.path().join(META_FILE),
            r#"{"subject_id":"x","fs_hz":4.0,"n_channels":2,"duration_s":20.0,"extra":1}"#,
        )
        .unwrap();
        assert!(load_session(dir.path()).is_err());
    }
}
