//! Episode container: little-endian binary blocks plus a JSON manifest.
//!
//! Layout: `b"PHYD"`, `u32` version, `u32` episode count, then per episode
//! `u8` category (0 = uncategorized), `u64` seed, `u32` T, H, W, K,
//! `f64 x 4` bounds, per state a `u64` time index followed by per object
//! `f64` px, py, vx, vy, mass, charge, radius and `u32` color, shape;
//! then `f32` frames (`T*H*W*3`) and `u8` masks (`T*K*H*W`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::episode::{generate_episode, Category, Episode, SceneConfig};
use crate::error::{Result, SimError};
use crate::world::{Bounds, Shape, Vec2, WorldObject, WorldState};

pub const MAGIC: &[u8; 4] = b"PHYD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub category: u8,
    pub seed: u64,
    /// Byte offset of the episode block in the container.
    pub offset: u64,
    pub length: u64,
    pub objects: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub counts: [usize; 5],
    pub config: SceneConfig,
    pub episodes: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn of_category(&self, c: Category) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.category == Some(c))
    }
}

/// Per-episode seed, decorrelated across categories and indices.
pub fn derive_seed(base: u64, category: Category, index: usize) -> u64 {
    let mut z = base
        .wrapping_add((category as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `counts[c-1]` episodes of each category `c`, in category order.
pub fn generate_episodes(cfg: &SceneConfig, counts: [usize; 5], seed: u64) -> Result<Dataset> {
    let mut episodes = Vec::with_capacity(counts.iter().sum());
    for c in Category::ALL {
        for i in 0..counts[c.index()] {
            episodes.push(generate_episode(cfg, c, derive_seed(seed, c, i))?);
        }
    }
    Ok(Dataset { episodes })
}

/// Path of the JSON manifest that sits next to a container.
pub fn manifest_path(container: &Path) -> PathBuf {
    let mut name = container.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Generates a dataset and writes the container and its manifest.
pub fn generate_dataset(
    cfg: &SceneConfig,
    counts: [usize; 5],
    seed: u64,
    path: &Path,
) -> Result<(Dataset, Manifest)> {
    let data = generate_episodes(cfg, counts, seed)?;
    let manifest = write_dataset(&data, cfg, counts, seed, path)?;
    Ok((data, manifest))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_episode(ep: &Episode) -> Vec<u8> {
    let mut b = Vec::new();
    let t = ep.num_frames();
    let k = ep.num_objects();
    let bounds = ep.states[0].bounds;
    // writes into a Vec never fail
    b.write_u8(ep.category.map_or(0, u8::from)).unwrap();
    b.write_u64::<LE>(ep.seed).unwrap();
    for d in [t, ep.height, ep.width, k] {
        b.write_u32::<LE>(d as u32).unwrap();
    }
    for v in [bounds.min.x, bounds.min.y, bounds.max.x, bounds.max.y] {
        b.write_f64::<LE>(v).unwrap();
    }
    for s in &ep.states {
        b.write_u64::<LE>(s.time_index).unwrap();
        for o in &s.objects {
            for v in [
                o.position.x,
                o.position.y,
                o.velocity.x,
                o.velocity.y,
                o.mass,
                o.charge,
                o.radius,
            ] {
                b.write_f64::<LE>(v).unwrap();
            }
            b.write_u32::<LE>(o.color_id).unwrap();
            b.write_u32::<LE>(o.shape.id()).unwrap();
        }
    }
    for &v in &ep.frames {
        b.write_f32::<LE>(v).unwrap();
    }
    b.extend_from_slice(&ep.masks);
    b
}

/// Writes the container and its manifest; returns the manifest.
pub fn write_dataset(
    data: &Dataset,
    cfg: &SceneConfig,
    counts: [usize; 5],
    seed: u64,
    path: &Path,
) -> Result<Manifest> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(12);
    header.extend_from_slice(MAGIC);
    header.write_u32::<LE>(VERSION).unwrap();
    header.write_u32::<LE>(data.episodes.len() as u32).unwrap();
    w.write_all(&header).map_err(io_err(path))?;
    let mut offset = header.len() as u64;
    let mut entries = Vec::with_capacity(data.episodes.len());
    for (index, ep) in data.episodes.iter().enumerate() {
        let block = encode_episode(ep);
        w.write_all(&block).map_err(io_err(path))?;
        entries.push(ManifestEntry {
            index,
            category: ep.category.map_or(0, u8::from),
            seed: ep.seed,
            offset,
            length: block.len() as u64,
            objects: ep.num_objects(),
            frames: ep.num_frames(),
        });
        offset += block.len() as u64;
    }
    w.flush().map_err(io_err(path))?;
    let manifest = Manifest {
        format: "PHYD".into(),
        version: VERSION,
        seed,
        counts,
        config: cfg.clone(),
        episodes: entries,
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json).map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_manifest(container: &Path) -> Result<Manifest> {
    let mpath = manifest_path(container);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    serde_json::from_str(&text).map_err(|e| SimError::Format {
        path: mpath,
        reason: e.to_string(),
    })
}

struct Decoder<'a, R: Read> {
    r: R,
    path: &'a Path,
}

impl<R: Read> Decoder<'_, R> {
    fn fail(&self, e: std::io::Error) -> SimError {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SimError::Format {
                path: self.path.to_path_buf(),
                reason: "truncated container".into(),
            }
        } else {
            SimError::Io {
                path: self.path.to_path_buf(),
                source: e,
            }
        }
    }
    fn u8(&mut self) -> Result<u8> {
        self.r.read_u8().map_err(|e| self.fail(e))
    }
    fn u32(&mut self) -> Result<u32> {
        self.r.read_u32::<LE>().map_err(|e| self.fail(e))
    }
    fn u64(&mut self) -> Result<u64> {
        self.r.read_u64::<LE>().map_err(|e| self.fail(e))
    }
    fn f64(&mut self) -> Result<f64> {
        self.r.read_f64::<LE>().map_err(|e| self.fail(e))
    }
    fn format(&self, reason: impl Into<String>) -> SimError {
        SimError::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn episode(&mut self) -> Result<Episode> {
        let cat = self.u8()?;
        let category = match cat {
            0 => None,
            c => Some(Category::try_from(c).map_err(|_| self.format(format!("bad category {c}")))?),
        };
        let seed = self.u64()?;
        let t = self.u32()? as usize;
        let height = self.u32()? as usize;
        let width = self.u32()? as usize;
        let k = self.u32()? as usize;
        if t == 0 || k == 0 || t * height * width * k > 1 << 32 {
            return Err(self.format("implausible episode dimensions"));
        }
        let (x0, y0, x1, y1) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let bounds = Bounds {
            min: Vec2::new(x0, y0),
            max: Vec2::new(x1, y1),
        };
        let mut states = Vec::with_capacity(t);
        for _ in 0..t {
            let time_index = self.u64()?;
            let mut objects = Vec::with_capacity(k);
            for _ in 0..k {
                let mut v = [0.0; 7];
                for x in &mut v {
                    *x = self.f64()?;
                }
                let color_id = self.u32()?;
                let shape_id = self.u32()?;
                let shape = Shape::from_id(shape_id)
                    .ok_or_else(|| self.format(format!("bad shape id {shape_id}")))?;
                objects.push(WorldObject {
                    position: Vec2::new(v[0], v[1]),
                    velocity: Vec2::new(v[2], v[3]),
                    mass: v[4],
                    charge: v[5],
                    radius: v[6],
                    color_id,
                    shape,
                });
            }
            states.push(WorldState {
                objects,
                time_index,
                bounds,
            });
        }
        let mut raw = vec![0u8; t * height * width * 3 * 4];
        self.r.read_exact(&mut raw).map_err(|e| self.fail(e))?;
        let frames = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut masks = vec![0u8; t * k * height * width];
        self.r.read_exact(&mut masks).map_err(|e| self.fail(e))?;
        Ok(Episode {
            category,
            seed,
            height,
            width,
            states,
            frames,
            masks,
        })
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut d = Decoder {
        r: BufReader::new(file),
        path,
    };
    let mut magic = [0u8; 4];
    d.r.read_exact(&mut magic).map_err(|e| d.fail(e))?;
    if &magic != MAGIC {
        return Err(d.format("bad magic, expected PHYD"));
    }
    let version = d.u32()?;
    if version != VERSION {
        return Err(d.format(format!("unsupported version {version}")));
    }
    let n = d.u32()? as usize;
    let mut episodes = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        episodes.push(d.episode()?);
    }
    let mut rest = [0u8; 1];
    if d.r.read(&mut rest).map_err(|e| d.fail(e))? != 0 {
        return Err(d.format("trailing bytes after last episode"));
    }
    Ok(Dataset { episodes })
}
