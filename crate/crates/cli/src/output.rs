use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use autodiff::Tensor;
use clap::ValueEnum;
use physcon::image::Image;
use serde::Serialize;

use crate::config::{Provenance, RunConfig, VERSION};
use crate::error::{io_err, CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    #[default]
    Ppm,
    Png,
}

impl ImageFormat {
    fn ext(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

fn write_png(img: &Image, path: &Path) -> Result<()> {
    let enc_err = |e: png::EncodingError| CliError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(enc_err)?;
    w.write_image_data(&img.data).map_err(enc_err)?;
    w.finish().map_err(enc_err)
}

/// Writes `img` as `stem.<ext>` and returns the path.
pub fn write_image(img: &Image, stem: &Path, fmt: ImageFormat) -> Result<PathBuf> {
    let path = stem.with_extension(fmt.ext());
    match fmt {
        ImageFormat::Ppm => img.write_ppm(&path)?,
        ImageFormat::Png => write_png(img, &path)?,
    }
    Ok(path)
}

/// Numbered frames `frame_000.<ext>`, ... in `dir`.
pub fn write_frames(dir: &Path, frames: &[Tensor], fmt: ImageFormat) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (t, f) in frames.iter().enumerate() {
        write_image(&Image::from_frame(f)?, &dir.join(format!("frame_{t:03}")), fmt)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// JSON value tagged with the code version.
pub fn versioned<T: Serialize>(value: &T) -> serde_json::Value {
    let mut v = serde_json::to_value(value).expect("output serializes");
    if let serde_json::Value::Object(m) = &mut v {
        m.insert("version".into(), VERSION.into());
    }
    v
}

/// `dir/run.toml` for directory outputs, `file.run.toml` otherwise.
pub fn provenance_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.toml")
    } else {
        let mut name = out.as_os_str().to_owned();
        name.push(".run.toml");
        PathBuf::from(name)
    }
}

pub fn write_provenance(out: &Path, command: &str, config: &RunConfig) -> Result<PathBuf> {
    let path = provenance_path(out);
    let p = Provenance {
        version: VERSION,
        command,
        config,
    };
    std::fs::write(&path, p.to_toml()).map_err(io_err(&path))?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}
