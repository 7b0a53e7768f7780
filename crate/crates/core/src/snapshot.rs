//! On-disk formats.
//!
//! Data snapshots are line-based text headed by `COCOREC-DATA-v1`; model
//! checkpoints are little-endian binary headed by `COCOREC-BRM-v1`.

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

use crate::brm::BrmParams;
use crate::ingest::{FoldSplit, Prepared};
use crate::numerics::Mat;
use crate::session::{Dataset, Interaction, Session, Vocab};

pub const DATA_MAGIC: &str = "COCOREC-DATA-v1";
pub const BRM_MAGIC: &[u8] = b"COCOREC-BRM-v1\n";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic header (expected {expected})")]
    Magic { expected: &'static str },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write_data<W: Write>(out: &mut W, prepared: &Prepared) -> io::Result<()> {
    let ds = &prepared.dataset;
    writeln!(out, "{DATA_MAGIC}")?;
    writeln!(out, "skipped\t{}", prepared.skipped_rows)?;
    writeln!(out, "users\t{}", ds.users.len())?;
    for name in ds.users.names() {
        writeln!(out, "{name}")?;
    }
    writeln!(out, "items\t{}", ds.items.len())?;
    for name in ds.items.names() {
        writeln!(out, "{name}")?;
    }
    writeln!(out, "interactions\t{}", ds.n_interactions())?;
    for x in ds.histories.iter().flatten() {
        writeln!(out, "{}\t{}\t{}", x.user, x.item, x.timestamp)?;
    }
    writeln!(out, "sessions\t{}", prepared.sessions.len())?;
    for s in &prepared.sessions {
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", s.id, s.user, s.start_time, s.end_time, s.offset, join(&s.items))?;
    }
    writeln!(out, "folds\t{}", prepared.folds.len())?;
    for f in &prepared.folds {
        writeln!(out, "fold\t{}\t{}", f.index, f.reassigned)?;
        writeln!(out, "train\t{}", join(&f.train))?;
        writeln!(out, "test\t{}", join(&f.test))?;
        writeln!(out, "validation\t{}", join(&f.validation))?;
    }
    writeln!(out, "end")
}

fn join(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

struct Lines<R> {
    inner: io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String, SnapshotError> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> SnapshotError {
        SnapshotError::Parse { line: self.line, msg: msg.into() }
    }

    /// Next line split on tabs, whose first field must equal `tag`.
    fn tagged(&mut self, tag: &str) -> Result<Vec<String>, SnapshotError> {
        let l = self.next()?;
        let fields: Vec<String> = l.split('\t').map(str::to_owned).collect();
        if fields[0] != tag {
            return Err(self.err(format!("expected '{tag}', found '{}'", fields[0])));
        }
        Ok(fields)
    }

    fn count(&mut self, tag: &str) -> Result<usize, SnapshotError> {
        let fields = self.tagged(tag)?;
        self.num(fields.get(1).map(String::as_str).unwrap_or(""))
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T, SnapshotError> {
        s.parse().map_err(|_| self.err(format!("bad number '{s}'")))
    }

    fn ids(&self, s: Option<&String>) -> Result<Vec<u32>, SnapshotError> {
        match s.map(String::as_str) {
            None | Some("") => Ok(Vec::new()),
            Some(s) => s.split(',').map(|x| self.num(x)).collect(),
        }
    }
}

pub fn read_data<R: BufRead>(input: R) -> Result<Prepared, SnapshotError> {
    let mut lines = Lines { inner: input.lines(), line: 0 };
    if lines.next().ok().as_deref() != Some(DATA_MAGIC) {
        return Err(SnapshotError::Magic { expected: DATA_MAGIC });
    }
    let skipped_rows = lines.count("skipped")?;

    let mut vocabs = Vec::new();
    for tag in ["users", "items"] {
        let n = lines.count(tag)?;
        let names = (0..n).map(|_| lines.next()).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocab::from_names(names);
        if vocab.len() != n {
            return Err(lines.err(format!("duplicate {tag} names")));
        }
        vocabs.push(vocab);
    }
    let items = vocabs.pop().expect("two vocabs");
    let users = vocabs.pop().expect("two vocabs");

    let n = lines.count("interactions")?;
    let mut histories: Vec<Vec<Interaction>> = vec![Vec::new(); users.len()];
    for _ in 0..n {
        let l = lines.next()?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 3 {
            return Err(lines.err("interaction needs 3 fields"));
        }
        let x = Interaction { user: lines.num(f[0])?, item: lines.num(f[1])?, timestamp: lines.num(f[2])? };
        if x.user as usize >= users.len() || x.item as usize >= items.len() {
            return Err(lines.err("id out of range"));
        }
        histories[x.user as usize].push(x);
    }

    let n = lines.count("sessions")?;
    let mut sessions = Vec::with_capacity(n);
    for _ in 0..n {
        let l = lines.next()?;
        let f: Vec<String> = l.split('\t').map(str::to_owned).collect();
        if f.len() != 6 {
            return Err(lines.err("session needs 6 fields"));
        }
        let s = Session {
            id: lines.num(&f[0])?,
            user: lines.num(&f[1])?,
            start_time: lines.num(&f[2])?,
            end_time: lines.num(&f[3])?,
            offset: lines.num(&f[4])?,
            items: lines.ids(f.get(5))?,
        };
        let fits = histories.get(s.user as usize).is_some_and(|h| s.offset + s.items.len() <= h.len());
        if !fits {
            return Err(lines.err("session does not fit its user's history"));
        }
        sessions.push(s);
    }

    let n = lines.count("folds")?;
    let mut folds = Vec::with_capacity(n);
    for _ in 0..n {
        let head = lines.tagged("fold")?;
        if head.len() != 3 {
            return Err(lines.err("fold header needs index and reassigned count"));
        }
        let index = lines.num(&head[1])?;
        let reassigned = lines.num(&head[2])?;
        let train = lines.tagged("train")?;
        let train = lines.ids(train.get(1))?;
        let test = lines.tagged("test")?;
        let test = lines.ids(test.get(1))?;
        let validation = lines.tagged("validation")?;
        let validation = lines.ids(validation.get(1))?;
        folds.push(FoldSplit { index, train, test, validation, reassigned });
    }
    lines.tagged("end")?;

    Ok(Prepared { dataset: Dataset { users, items, histories }, sessions, folds, skipped_rows })
}

pub fn write_checkpoint<W: Write>(out: &mut W, params: &BrmParams, users: &Vocab, items: &Vocab) -> io::Result<()> {
    out.write_all(BRM_MAGIC)?;
    for n in [params.dim, params.n_users(), params.n_items()] {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    let arrays = [params.user_emb.as_slice(), params.item_emb.as_slice(), &params.gate_w, std::slice::from_ref(&params.gate_b)];
    for x in arrays.into_iter().flatten() {
        out.write_all(&x.to_le_bytes())?;
    }
    for vocab in [users, items] {
        out.write_all(&(vocab.len() as u64).to_le_bytes())?;
        for name in vocab.names() {
            out.write_all(&(name.len() as u64).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: BrmParams,
    pub users: Vocab,
    pub items: Vocab,
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64, SnapshotError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>, SnapshotError> {
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

// guards allocations against garbage headers
const MAX_COUNT: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint, SnapshotError> {
    let mut magic = vec![0u8; BRM_MAGIC.len()];
    input.read_exact(&mut magic).map_err(|_| SnapshotError::Magic { expected: "COCOREC-BRM-v1" })?;
    if magic != BRM_MAGIC {
        return Err(SnapshotError::Magic { expected: "COCOREC-BRM-v1" });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let n = read_u64(input)?;
        if n > MAX_COUNT {
            return Err(SnapshotError::Corrupt(format!("implausible size {n}")));
        }
        *d = n as usize;
    }
    let [dim, n_users, n_items] = dims;
    let corrupt = |e: crate::numerics::NumericsError| SnapshotError::Corrupt(e.to_string());
    let user_emb = Mat::from_vec(n_users, dim, read_f64s(input, n_users * dim)?).map_err(corrupt)?;
    let item_emb = Mat::from_vec(n_items, dim, read_f64s(input, n_items * dim)?).map_err(corrupt)?;
    let gate_w = read_f64s(input, 3 * dim)?;
    let gate_b = read_f64s(input, 1)?[0];

    let mut vocabs = Vec::new();
    for expected in [n_users, n_items] {
        let n = read_u64(input)?;
        if n != expected as u64 {
            return Err(SnapshotError::Corrupt(format!("vocabulary has {n} names, expected {expected}")));
        }
        let mut names = Vec::with_capacity(expected);
        for _ in 0..n {
            let len = read_u64(input)?;
            if len > MAX_COUNT {
                return Err(SnapshotError::Corrupt(format!("implausible name length {len}")));
            }
            let mut buf = vec![0u8; len as usize];
            input.read_exact(&mut buf)?;
            names.push(String::from_utf8(buf).map_err(|e| SnapshotError::Corrupt(e.to_string()))?);
        }
        vocabs.push(Vocab::from_names(names));
    }
    let items = vocabs.pop().expect("two vocabs");
    let users = vocabs.pop().expect("two vocabs");
    Ok(Checkpoint { params: BrmParams { dim, user_emb, item_emb, gate_w, gate_b }, users, items })
}
