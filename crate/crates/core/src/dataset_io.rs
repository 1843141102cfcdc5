//! Binary dataset files.
//!
//! Layout (little-endian): magic `DCE1`, `u32` version, `u32` state_dim,
//! `u32` action_dim, `u64` count, `u8` behavior tag, then `count` records of
//! `f32` state, action, reward, next_state and done (0 or 1).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DceError, Result};
use crate::mdp::{BehaviorTag, OfflineDataset, Transition};

pub const MAGIC: [u8; 4] = *b"DCE1";
pub const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(mut w: W, data: &OfflineDataset) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.state_dim() as u32).to_le_bytes())?;
    w.write_all(&(data.action_dim() as u32).to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&[data.behavior_tag().code()])?;
    for t in data.transitions() {
        let done = if t.done { 1.0f32 } else { 0.0 };
        let fields = t.state.iter().chain(&t.action).chain([&t.reward]).chain(&t.next_state).chain([&done]);
        for x in fields {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DceError::Truncated(what.to_string()),
        _ => DceError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<OfflineDataset> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(DceError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(DceError::Version { expected: VERSION, found: version });
    }
    let sd = read_u32(&mut r, "state_dim")? as usize;
    let ad = read_u32(&mut r, "action_dim")? as usize;
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "count")?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut tag = [0u8; 1];
    read_exact(&mut r, &mut tag, "behavior tag")?;
    let tag = BehaviorTag::from_code(tag[0]).ok_or_else(|| DceError::invalid(format!("unknown behavior tag {}", tag[0])))?;

    let width = 2 * sd + ad + 2;
    let mut record = vec![0u8; 4 * width];
    // cap the up-front allocation; a lying header fails on truncation instead
    let mut transitions = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        read_exact(&mut r, &mut record, &format!("record {i} of {count}"))?;
        let f: Vec<f32> = record.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        transitions.push(Transition {
            state: f[..sd].to_vec(),
            action: f[sd..sd + ad].to_vec(),
            reward: f[sd + ad],
            next_state: f[sd + ad + 1..2 * sd + ad + 1].to_vec(),
            done: f[width - 1] != 0.0,
        });
    }
    OfflineDataset::new(sd, ad, transitions, tag)
}

pub fn save_dataset(path: &Path, data: &OfflineDataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), data)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
