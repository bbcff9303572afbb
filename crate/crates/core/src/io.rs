//! Binary feature-bag files and the directory manifest that orders them.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "FBAG" | version u8 = 1 | 3 reserved bytes
//! task_id u32 | n_cases u32 | d_p u32 | n_groups u32 (= 6) | group widths 6 × u32
//! per case:
//!   id_len u32 | id utf-8 | task_id u32 | time f64 | censored u8 | n_p u32
//!   patches n_p·d_p × f32 (row-major) | genomic groups Σwidths × f32
//! ```
//!
//! `manifest.toml` lists the files in task order:
//!
//! ```toml
//! n_bins = 4
//! [[task]]
//! name = "task0"
//! file = "task0.fbag"
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::{CaseRecord, GenomicProfile, PatchBag, TaskData, TaskStream, N_GENOMIC_GROUPS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FBAG";
pub const VERSION: u8 = 1;
pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    pub task: Vec<ManifestTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub name: String,
    pub file: String,
}

fn default_bins() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileHeader {
    pub task_id: u32,
    pub n_cases: u32,
    pub patch_dim: u32,
    pub group_dims: [u32; N_GENOMIC_GROUPS],
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes one case without any header. Features are narrowed to `f32`.
pub fn write_case<W: Write>(w: &mut W, case: &CaseRecord) -> std::io::Result<()> {
    let id = case.id.as_bytes();
    w.write_u32::<LE>(id.len() as u32)?;
    w.write_all(id)?;
    w.write_u32::<LE>(case.task as u32)?;
    w.write_f64::<LE>(case.time)?;
    w.write_u8(case.censored as u8)?;
    w.write_u32::<LE>(case.patches.n_patches() as u32)?;
    for &v in case.patches.features().data() {
        w.write_f32::<LE>(v as f32)?;
    }
    for i in 0..N_GENOMIC_GROUPS {
        for &v in case.genomics.original(i) {
            w.write_f32::<LE>(v as f32)?;
        }
    }
    Ok(())
}

/// Field-level decoding failure; the caller attaches the file path.
#[derive(Debug)]
pub struct FieldError {
    pub field: String,
    pub detail: String,
}

impl FieldError {
    pub fn into_error(self, path: &Path) -> Error {
        Error::FileField {
            path: path.to_path_buf(),
            field: self.field,
            detail: self.detail,
        }
    }
}

fn field<T>(r: std::io::Result<T>, name: impl Fn() -> String) -> Result<T, FieldError> {
    r.map_err(|e| FieldError {
        field: name(),
        detail: if e.kind() == ErrorKind::UnexpectedEof {
            "file ends early".to_string()
        } else {
            e.to_string()
        },
    })
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LE>(&mut buf)?;
    Ok(buf.into_iter().map(f64::from).collect())
}

/// Reads one case written by [`write_case`]; genomic groups are padded to `width`.
pub fn read_case<R: Read>(
    r: &mut R,
    index: usize,
    patch_dim: usize,
    group_dims: &[usize],
    width: usize,
) -> Result<CaseRecord, FieldError> {
    let at = |f: &str| format!("case[{index}].{f}");
    let id_len = field(r.read_u32::<LE>(), || at("id_len"))? as usize;
    if id_len > 1 << 20 {
        return Err(FieldError {
            field: at("id_len"),
            detail: format!("implausible id length {id_len}"),
        });
    }
    let mut id = vec![0u8; id_len];
    field(r.read_exact(&mut id), || at("id"))?;
    let id = String::from_utf8(id).map_err(|e| FieldError {
        field: at("id"),
        detail: e.to_string(),
    })?;
    let task = field(r.read_u32::<LE>(), || at("task_id"))? as usize;
    let time = field(r.read_f64::<LE>(), || at("time"))?;
    if !(time.is_finite() && time >= 0.0) {
        return Err(FieldError {
            field: at("time"),
            detail: format!("survival time {time} is not a finite nonnegative number"),
        });
    }
    let censored = match field(r.read_u8(), || at("censored"))? {
        0 => false,
        1 => true,
        b => {
            return Err(FieldError {
                field: at("censored"),
                detail: format!("flag byte {b} is neither 0 nor 1"),
            })
        }
    };
    let n_p = field(r.read_u32::<LE>(), || at("n_patches"))? as usize;
    if n_p == 0 || n_p > 1 << 24 {
        return Err(FieldError {
            field: at("n_patches"),
            detail: format!("bag size {n_p} out of range"),
        });
    }
    let patches = field(read_f32s(r, n_p * patch_dim), || at("patches"))?;
    let patches = PatchBag::new(n_p, patch_dim, patches).map_err(|e| FieldError {
        field: at("patches"),
        detail: e.to_string(),
    })?;
    let mut groups = Vec::with_capacity(N_GENOMIC_GROUPS);
    for (gi, &gd) in group_dims.iter().enumerate() {
        groups.push(field(read_f32s(r, gd), || at(&format!("genomic[{gi}]")))?);
    }
    let genomics = GenomicProfile::new(groups, width).map_err(|e| FieldError {
        field: at("genomic"),
        detail: e.to_string(),
    })?;
    Ok(CaseRecord {
        id,
        task,
        time,
        censored,
        label: 0,
        patches,
        genomics,
    })
}

pub fn write_task_file(path: &Path, task_id: usize, task: &TaskData) -> Result<()> {
    let first = task
        .cases
        .first()
        .ok_or_else(|| Error::Data(format!("task {task_id} has no cases to write")))?;
    let dims = first.genomics.dims().to_vec();
    let d_p = first.patches.dim();
    for c in &task.cases {
        if c.genomics.dims() != dims.as_slice() || c.patches.dim() != d_p {
            return Err(Error::Data(format!("case {} dimensions differ within task {task_id}", c.id)));
        }
    }
    let f = File::create(path).map_err(write_err(path))?;
    let mut w = BufWriter::new(f);
    let out = (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u8(VERSION)?;
        w.write_all(&[0u8; 3])?;
        w.write_u32::<LE>(task_id as u32)?;
        w.write_u32::<LE>(task.cases.len() as u32)?;
        w.write_u32::<LE>(d_p as u32)?;
        w.write_u32::<LE>(N_GENOMIC_GROUPS as u32)?;
        for &d in &dims {
            w.write_u32::<LE>(d as u32)?;
        }
        for c in &task.cases {
            write_case(&mut w, c)?;
        }
        w.flush()
    })();
    out.map_err(write_err(path))
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<FileHeader> {
    let corrupt = |detail: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        detail,
    };
    let eof = |e: std::io::Error| {
        if e.kind() == ErrorKind::UnexpectedEof {
            corrupt("file is shorter than the header".into())
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = r.read_u8().map_err(eof)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mut reserved = [0u8; 3];
    r.read_exact(&mut reserved).map_err(eof)?;
    let task_id = r.read_u32::<LE>().map_err(eof)?;
    let n_cases = r.read_u32::<LE>().map_err(eof)?;
    let patch_dim = r.read_u32::<LE>().map_err(eof)?;
    let n_groups = r.read_u32::<LE>().map_err(eof)?;
    if n_groups as usize != N_GENOMIC_GROUPS {
        return Err(corrupt(format!("expected {N_GENOMIC_GROUPS} genomic groups, header says {n_groups}")));
    }
    if patch_dim == 0 {
        return Err(corrupt("patch dimension is zero".into()));
    }
    let mut group_dims = [0u32; N_GENOMIC_GROUPS];
    for d in &mut group_dims {
        *d = r.read_u32::<LE>().map_err(eof)?;
    }
    Ok(FileHeader {
        task_id,
        n_cases,
        patch_dim,
        group_dims,
    })
}

pub fn read_task_header(path: &Path) -> Result<FileHeader> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(f), path)
}

/// Reads a task file, padding genomic groups to `width` (at least the
/// file's widest group).
pub fn read_task_cases(path: &Path, width: usize) -> Result<(FileHeader, Vec<CaseRecord>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let h = read_header(&mut r, path)?;
    let dims: Vec<usize> = h.group_dims.iter().map(|&d| d as usize).collect();
    let width = width.max(dims.iter().copied().max().unwrap_or(0));
    let mut cases = Vec::with_capacity(h.n_cases as usize);
    for i in 0..h.n_cases as usize {
        let c = read_case(&mut r, i, h.patch_dim as usize, &dims, width).map_err(|e| e.into_error(path))?;
        if c.task != h.task_id as usize {
            return Err(Error::FileField {
                path: path.to_path_buf(),
                field: format!("case[{i}].task_id"),
                detail: format!("case says task {} but file header says {}", c.task, h.task_id),
            });
        }
        cases.push(c);
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok((h, cases)),
        Ok(_) => Err(Error::FileField {
            path: path.to_path_buf(),
            field: "n_cases".into(),
            detail: format!("bytes remain after the declared {} cases", h.n_cases),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::FileField {
        path: path.clone(),
        field: "manifest".into(),
        detail: e.to_string(),
    })?;
    if m.task.is_empty() {
        return Err(Error::FileField {
            path,
            field: "task".into(),
            detail: "manifest lists no tasks".into(),
        });
    }
    Ok(m)
}

/// Writes one file per task plus the manifest.
pub fn write_stream(dir: &Path, stream: &TaskStream) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::with_capacity(stream.n_tasks());
    for (k, t) in stream.tasks.iter().enumerate() {
        let file = format!("task{k}.fbag");
        write_task_file(&dir.join(&file), k, t)?;
        tasks.push(ManifestTask {
            name: t.name.clone(),
            file,
        });
    }
    let m = Manifest {
        n_bins: stream.n_bins(),
        task: tasks,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads every task listed in the manifest, pads genomic groups to the
/// widest group across all tasks and derives each task's bins.
pub fn ingest_feature_bags(dir: &Path) -> Result<TaskStream> {
    let manifest = read_manifest(dir)?;
    let paths: Vec<PathBuf> = manifest.task.iter().map(|t| dir.join(&t.file)).collect();
    let mut width = 0usize;
    let mut patch_dim = None;
    for (k, p) in paths.iter().enumerate() {
        let h = read_task_header(p)?;
        if h.task_id as usize != k {
            return Err(Error::FileField {
                path: p.clone(),
                field: "task_id".into(),
                detail: format!("manifest position {k} but header task {}", h.task_id),
            });
        }
        match patch_dim {
            None => patch_dim = Some(h.patch_dim),
            Some(d) if d != h.patch_dim => {
                return Err(Error::FileField {
                    path: p.clone(),
                    field: "d_p".into(),
                    detail: format!("patch dimension {} differs from {} in earlier files", h.patch_dim, d),
                })
            }
            _ => {}
        }
        width = width.max(h.group_dims.iter().copied().max().unwrap_or(0) as usize);
    }
    let mut tasks = Vec::with_capacity(paths.len());
    for (p, mt) in paths.iter().zip(&manifest.task) {
        let (_, cases) = read_task_cases(p, width)?;
        if cases.is_empty() {
            return Err(Error::FileField {
                path: p.clone(),
                field: "n_cases".into(),
                detail: "file holds no cases".into(),
            });
        }
        tasks.push(TaskData::new(mt.name.clone(), cases, manifest.n_bins)?);
    }
    TaskStream::new(tasks)
}
