//! Manifest CSV: `#key=value` metadata lines, then the header
//! `id,path,score,reference_id`, then one row per sample. Relative image
//! paths resolve against the manifest's directory. LF and CRLF both parse.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{ImageSource, Manifest, ManifestMeta, Sample};
use crate::error::{Error, Result};

const HEADER: [&str; 4] = ["id", "path", "score", "reference_id"];

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Parses manifest text. `source` names the file in error messages and
/// provides the default manifest name.
pub fn parse_manifest(text: &str, base_dir: &Path, source: &str) -> Result<Manifest> {
    let err = |line: usize, msg: String| Error::Manifest {
        path: source.to_string(),
        line,
        msg,
    };
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);

    let mut meta = ManifestMeta::new(
        Path::new(source)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".into()),
    );
    let mut label_min = None;
    let mut label_max = None;
    let mut rest = text;
    let mut meta_lines = 0usize;
    while rest.starts_with('#') {
        let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
        rest = tail;
        meta_lines += 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let lineno = meta_lines;
        let (k, v) = line[1..]
            .split_once('=')
            .ok_or_else(|| err(lineno, format!("expected #key=value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = |what: &str| err(lineno, format!("bad {what} {v:?}"));
        match k {
            "name" => meta.name = v.to_string(),
            "label_min" => label_min = Some(v.parse::<f32>().map_err(|_| bad("label_min"))?),
            "label_max" => label_max = Some(v.parse::<f32>().map_err(|_| bad("label_max"))?),
            "synthetic" => meta.synthetic = parse_bool(v).ok_or_else(|| bad("synthetic"))?,
            "labeled" => meta.labeled = parse_bool(v).ok_or_else(|| bad("labeled"))?,
            "" => return Err(err(lineno, "empty metadata key".into())),
            _ => {
                meta.extra.insert(k.to_string(), v.to_string());
            }
        }
    }
    meta.label_range = match (label_min, label_max) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => {
            return Err(err(
                meta_lines.max(1),
                "label_min and label_max must be given together".into(),
            ))
        }
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(rest.as_bytes());
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(1) + meta_lines;
        err(line, e.to_string())
    };
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(err(
            meta_lines + 1,
            format!("expected header {:?}, got {:?}", HEADER.join(","), header.iter().collect::<Vec<_>>()),
        ));
    }

    let mut samples = Vec::new();
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0) + meta_lines;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let id = field(0);
        if id.is_empty() {
            return Err(err(line, "empty id".into()));
        }
        if let Some(prev) = ids.insert(id.to_string(), line) {
            return Err(err(line, format!("duplicate id {id:?} (first on line {prev})")));
        }
        let path = field(1);
        if path.is_empty() {
            return Err(err(line, format!("sample {id:?} has no image path")));
        }
        let score = match field(2) {
            "" if meta.labeled => {
                return Err(err(line, format!("sample {id:?} has no score in a labeled manifest")))
            }
            "" => None,
            s => {
                let y: f32 = s.parse().map_err(|_| err(line, format!("bad score {s:?}")))?;
                if !y.is_finite() {
                    return Err(err(line, format!("non-finite score {s:?}")));
                }
                if let Some((lo, hi)) = meta.label_range {
                    if y < lo || y > hi {
                        return Err(err(line, format!("score {y} outside label range [{lo}, {hi}]")));
                    }
                }
                Some(y)
            }
        };
        let reference_id = match field(3) {
            "" => None,
            r => Some(r.to_string()),
        };
        let p = PathBuf::from(path);
        let image = ImageSource::File(if p.is_absolute() { p } else { base_dir.join(p) });
        samples.push(Sample {
            id: id.to_string(),
            image,
            score,
            reference_id,
        });
    }
    Manifest::new(meta, samples).map_err(|e| err(0, e.to_string()))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, &path.display().to_string())
}

fn safe_file_stem(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Writes `manifest` to `path`. In-memory images go to `images/<id>.ppm`
/// next to the manifest. Returns the file-backed manifest as written.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<Manifest> {
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let image_dir = dir.join("images");
    let mut out = String::new();
    let m = &manifest.meta;
    out.push_str(&format!("#name={}\n", m.name));
    if let Some((lo, hi)) = m.label_range {
        out.push_str(&format!("#label_min={lo}\n#label_max={hi}\n"));
    }
    out.push_str(&format!("#synthetic={}\n#labeled={}\n", m.synthetic, m.labeled));
    for (k, v) in &m.extra {
        out.push_str(&format!("#{k}={v}\n"));
    }

    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(HEADER)
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut written = Vec::with_capacity(manifest.len());
    for s in &manifest.samples {
        let (rel, abs) = match &s.image {
            ImageSource::Memory(t) => {
                if !safe_file_stem(&s.id) {
                    return Err(Error::Config(format!(
                        "sample id {:?} cannot be used as a file name",
                        s.id
                    )));
                }
                std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
                let file = image_dir.join(format!("{}.ppm", s.id));
                let bytes = super::ppm::encode(t).map_err(|msg| Error::Image {
                    path: file.display().to_string(),
                    msg,
                })?;
                std::fs::write(&file, bytes).map_err(|e| Error::io(&file, e))?;
                (format!("images/{}.ppm", s.id), file)
            }
            ImageSource::File(p) => {
                let rel = p
                    .strip_prefix(&dir)
                    .map(|r| r.display().to_string())
                    .unwrap_or_else(|_| p.display().to_string());
                (rel, p.clone())
            }
        };
        let score = s.score.map(|y| y.to_string()).unwrap_or_default();
        writer
            .write_record([
                s.id.as_str(),
                rel.as_str(),
                score.as_str(),
                s.reference_id.as_deref().unwrap_or(""),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        written.push(Sample {
            image: ImageSource::File(abs),
            ..s.clone()
        });
    }
    let body = writer.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Manifest::new(manifest.meta.clone(), written)
}
