//! Corpus files: a UTF-8 key/value manifest block after a magic line, then
//! length-prefixed binary records of little-endian 32-bit ints and floats.
//! Records stream one at a time, so corpora never need to fit in memory.

use super::{Corpus, CorpusManifest, PretrainExample, Scheme};
use crate::env::{BanditTask, DarkroomTask, EnvSpec, GridPos, Split, State, Task, TaskFamily, Transition};
use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CORPUS_MAGIC: &str = "ICRL-CORPUS-1";

const KIND_DARKROOM: u32 = 0;
const KIND_BANDIT: u32 = 1;

struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn state(&mut self, s: &State) {
        if let State::Cell(p) = s {
            self.u32(p.x as u32);
            self.u32(p.y as u32);
        }
        // the bandit singleton state has no payload
    }
}

fn encode_record(rec: &PretrainExample) -> Vec<u8> {
    let mut w = RecordWriter::new();
    w.u32(match rec.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    match &rec.task {
        Task::Darkroom(t) => {
            w.u32(KIND_DARKROOM);
            w.u32(t.width as u32);
            w.u32(t.height as u32);
            w.u32(t.goal.x as u32);
            w.u32(t.goal.y as u32);
            w.u32(t.horizon as u32);
            w.f32(t.slip_prob);
        }
        Task::Bandit(t) => {
            w.u32(KIND_BANDIT);
            w.u32(t.k() as u32);
            w.f32(t.noise_std);
            for m in &t.arm_means {
                w.f32(*m);
            }
        }
    }
    w.u32(rec.transitions.len() as u32);
    for t in &rec.transitions {
        w.state(&t.state);
        w.u32(t.action as u32);
        w.f32(t.reward);
        w.state(&t.next_state);
    }
    w.state(&rec.query_state);
    w.u32(rec.optimal_action as u32);
    w.buf
}

struct RecordReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.buf.len() {
            return Err(Error::Format("truncated corpus record".into()));
        }
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
    fn state(&mut self, kind: u32) -> Result<State> {
        if kind == KIND_BANDIT {
            Ok(State::Unit)
        } else {
            let x = self.u32()? as usize;
            let y = self.u32()? as usize;
            Ok(State::Cell(GridPos::new(x, y)))
        }
    }
}

fn decode_record(buf: &[u8]) -> Result<PretrainExample> {
    let mut r = RecordReader { buf, pos: 0 };
    let split = match r.u32()? {
        0 => Split::Train,
        1 => Split::Test,
        other => return Err(Error::Format(format!("bad split tag {other}"))),
    };
    let kind = r.u32()?;
    let task = match kind {
        KIND_DARKROOM => {
            let width = r.u32()? as usize;
            let height = r.u32()? as usize;
            let gx = r.u32()? as usize;
            let gy = r.u32()? as usize;
            let horizon = r.u32()? as usize;
            let slip = r.f32()?;
            Task::Darkroom(DarkroomTask::new(
                width,
                height,
                GridPos::new(gx, gy),
                slip,
                horizon,
            ))
        }
        KIND_BANDIT => {
            let k = r.u32()? as usize;
            let noise_std = r.f32()?;
            let means = (0..k).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            Task::Bandit(BanditTask::new(means, noise_std))
        }
        other => return Err(Error::Format(format!("bad task kind {other}"))),
    };
    let n = r.u32()? as usize;
    let mut transitions = Vec::with_capacity(n);
    for _ in 0..n {
        let state = r.state(kind)?;
        let action = r.u32()? as usize;
        let reward = r.f32()?;
        let next_state = r.state(kind)?;
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
        });
    }
    let query_state = r.state(kind)?;
    let optimal_action = r.u32()? as usize;
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes in corpus record".into()));
    }
    Ok(PretrainExample {
        task,
        transitions,
        query_state,
        optimal_action,
        split,
    })
}

fn write_manifest(w: &mut impl Write, m: &CorpusManifest) -> std::io::Result<()> {
    writeln!(w, "{CORPUS_MAGIC}")?;
    writeln!(w, "family={}", m.env.family)?;
    writeln!(w, "width={}", m.env.width)?;
    writeln!(w, "height={}", m.env.height)?;
    writeln!(w, "horizon={}", m.env.horizon)?;
    writeln!(w, "slip={}", m.env.slip_prob)?;
    writeln!(w, "arms={}", m.env.arms)?;
    writeln!(w, "noise_std={}", m.env.noise_std)?;
    writeln!(
        w,
        "scheme={}",
        match m.scheme {
            Scheme::Onehot => "onehot",
            Scheme::Coords => "coords",
        }
    )?;
    writeln!(w, "num_records={}", m.num_records)?;
    writeln!(w, "seed={}", m.seed)?;
    writeln!(w, "shuffled={}", if m.shuffled { 1 } else { 0 })?;
    writeln!(w, "context_size={}", m.context_size)?;
    writeln!(w, "end")
}

fn parse_manifest(lines: &[String]) -> Result<CorpusManifest> {
    let mut kv = std::collections::BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad manifest line: {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::Format(format!("manifest missing key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad manifest value for {k}")))
    };
    let family: TaskFamily = get("family")?.parse()?;
    let env = EnvSpec {
        family,
        width: parse_usize("width")?,
        height: parse_usize("height")?,
        horizon: parse_usize("horizon")?,
        slip_prob: get("slip")?
            .parse()
            .map_err(|_| Error::Format("bad slip".into()))?,
        arms: parse_usize("arms")?,
        noise_std: get("noise_std")?
            .parse()
            .map_err(|_| Error::Format("bad noise_std".into()))?,
    };
    Ok(CorpusManifest {
        env,
        scheme: get("scheme")?.parse()?,
        num_records: parse_usize("num_records")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed".into()))?,
        shuffled: get("shuffled")?.as_str() == "1",
        context_size: parse_usize("context_size")?,
    })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_manifest(&mut w, &corpus.manifest)?;
    for rec in &corpus.records {
        let bytes = encode_record(rec);
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Streaming record iterator; holds one decoded record at a time.
pub struct CorpusReader {
    reader: BufReader<std::fs::File>,
    remaining: usize,
}

impl Iterator for CorpusReader {
    type Item = Result<PretrainExample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let mut len_buf = [0u8; 4];
        if let Err(e) = self.reader.read_exact(&mut len_buf) {
            let _ = e;
            return Some(Err(Error::Format("truncated corpus file".into())));
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut buf = vec![0u8; len];
        if self.reader.read_exact(&mut buf).is_err() {
            return Some(Err(Error::Format("truncated corpus file".into())));
        }
        Some(decode_record(&buf))
    }
}

/// Open a corpus, returning its manifest and a streaming reader.
pub fn open_corpus(path: &Path) -> Result<(CorpusManifest, CorpusReader)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut line = Vec::new();
    loop {
        line.clear();
        let mut byte = [0u8; 1];
        loop {
            if reader.read_exact(&mut byte).is_err() {
                return Err(Error::Format("truncated corpus manifest".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let s = String::from_utf8(line.clone())
            .map_err(|_| Error::Format("non-utf8 corpus manifest".into()))?;
        if s == "end" {
            break;
        }
        lines.push(s);
        if lines.len() > 1000 {
            return Err(Error::Format("corpus manifest missing end marker".into()));
        }
    }
    match lines.first() {
        Some(magic) if magic == CORPUS_MAGIC => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "corpus version mismatch: expected {CORPUS_MAGIC}, found {other}"
            )))
        }
        None => return Err(Error::Format("empty corpus file".into())),
    }
    let manifest = parse_manifest(&lines[1..])?;
    let remaining = manifest.num_records;
    Ok((manifest, CorpusReader { reader, remaining }))
}

/// Read a whole corpus into memory. Fails, returning no partial corpus, on
/// any truncation or format violation.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let (manifest, reader) = open_corpus(path)?;
    let records: Vec<PretrainExample> = reader.collect::<Result<_>>()?;
    if records.len() != manifest.num_records {
        return Err(Error::Format(format!(
            "record count mismatch: manifest says {}, file holds {}",
            manifest.num_records,
            records.len()
        )));
    }
    Ok(Corpus { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_bandit_corpus, make_darkroom_corpus};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("icrl_corpus_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_darkroom() {
        let spec = EnvSpec {
            horizon: 12,
            ..EnvSpec::for_family(TaskFamily::Darkroom)
        };
        let corpus = make_darkroom_corpus(&spec, 30, 1).unwrap();
        let path = tmp("dark.corpus");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn round_trip_bandit() {
        let spec = EnvSpec::for_family(TaskFamily::Bandit);
        let corpus = make_bandit_corpus(&spec, 40, 25, 2).unwrap();
        let path = tmp("bandit.corpus");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn files_are_byte_deterministic() {
        let spec = EnvSpec {
            horizon: 9,
            ..EnvSpec::for_family(TaskFamily::Darkroom)
        };
        let p1 = tmp("det1.corpus");
        let p2 = tmp("det2.corpus");
        write_corpus(&make_darkroom_corpus(&spec, 20, 42).unwrap(), &p1).unwrap();
        write_corpus(&make_darkroom_corpus(&spec, 20, 42).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_corpus_is_rejected() {
        let spec = EnvSpec {
            horizon: 9,
            ..EnvSpec::for_family(TaskFamily::Darkroom)
        };
        let path = tmp("trunc.corpus");
        write_corpus(&make_darkroom_corpus(&spec, 10, 3).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(read_corpus(&path).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let path = tmp("magic.corpus");
        std::fs::write(&path, b"ICRL-CORPUS-9\nend\n").unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("version mismatch"), "{err}");
    }

    #[test]
    fn streaming_reader_yields_records_lazily() {
        let spec = EnvSpec {
            horizon: 5,
            ..EnvSpec::for_family(TaskFamily::Darkroom)
        };
        let corpus = make_darkroom_corpus(&spec, 40, 4).unwrap();
        let path = tmp("stream.corpus");
        write_corpus(&corpus, &path).unwrap();
        let (manifest, reader) = open_corpus(&path).unwrap();
        assert_eq!(manifest.num_records, 40);
        let mut count = 0usize;
        for rec in reader {
            let rec = rec.unwrap();
            assert_eq!(rec.transitions.len(), 5);
            count += 1;
        }
        assert_eq!(count, 40);
    }
}
