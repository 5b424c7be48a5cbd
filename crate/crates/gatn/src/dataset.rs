//! Image directories: PPM files, one `.boxes` sidecar per image and a
//! `manifest.txt` listing `file label [seed]` per line.

use std::fmt::Write as _;
use std::path::Path;

use gatn_core::localizer::PixelBox;
use gatn_core::synthdata::SynthSample;

use crate::error::{self, CliError, CliResult};
use crate::pnm;

pub const MANIFEST: &str = "manifest.txt";

fn stem(index: usize, sample: &SynthSample) -> String {
    format!("{index:05}_c{}", sample.label)
}

/// Writes `samples` under `dir`, creating it if needed.
pub fn write_dir(dir: &Path, samples: &[SynthSample]) -> CliResult<()> {
    error::create_dir(dir)?;
    let mut manifest = String::from("# file label seed\n");
    for (i, s) in samples.iter().enumerate() {
        let stem = stem(i, s);
        pnm::write_ppm(&dir.join(format!("{stem}.ppm")), &s.image)?;
        let mut boxes = String::new();
        for b in &s.gt_boxes {
            writeln!(boxes, "{} {} {} {}", b.row0, b.col0, b.row1, b.col1).unwrap();
        }
        error::write(&dir.join(format!("{stem}.boxes")), boxes.as_bytes())?;
        writeln!(manifest, "{stem}.ppm {} {}", s.label, s.seed).unwrap();
    }
    error::write(&dir.join(MANIFEST), manifest.as_bytes())
}

fn parse_boxes(path: &Path, text: &str) -> CliResult<Vec<PixelBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<usize> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| {
            CliError::Io(format!("{}:{}: expected four non-negative integers", path.display(), n + 1))
        })?;
        match v[..] {
            [r0, c0, r1, c1] if r0 <= r1 && c0 <= c1 => out.push(PixelBox::new(r0, c0, r1, c1)),
            _ => {
                return Err(CliError::Io(format!(
                    "{}:{}: expected `row0 col0 row1 col1` with row0 <= row1 and col0 <= col1",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Loads every image named in `dir/manifest.txt`. Boxes come from the
/// matching `.boxes` sidecar when present and are clipped to the image.
pub fn load_dir(dir: &Path) -> CliResult<Vec<SynthSample>> {
    let manifest_path = dir.join(MANIFEST);
    let text = String::from_utf8(error::read(&manifest_path)?)
        .map_err(|_| CliError::io(&manifest_path, "manifest is not UTF-8"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| CliError::Io(format!("{}:{}: {what}", manifest_path.display(), n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(bad("expected `file label [seed]`"));
        }
        let label: usize = fields[1].parse().map_err(|_| bad("label is not a non-negative integer"))?;
        let seed: u64 = match fields.get(2) {
            Some(s) => s.parse().map_err(|_| bad("seed is not a non-negative integer"))?,
            None => 0,
        };
        let image_path = dir.join(fields[0]);
        let image = pnm::read_ppm(&image_path)?;
        let boxes_path = image_path.with_extension("boxes");
        let gt_boxes = if boxes_path.exists() {
            let text = String::from_utf8_lossy(&error::read(&boxes_path)?).into_owned();
            parse_boxes(&boxes_path, &text)?
                .into_iter()
                .map(|b| {
                    PixelBox::new(
                        b.row0.min(image.h()),
                        b.col0.min(image.w()),
                        b.row1.min(image.h()),
                        b.col1.min(image.w()),
                    )
                })
                .filter(|b| b.area() > 0)
                .collect()
        } else {
            Vec::new()
        };
        out.push(SynthSample {
            image,
            label,
            gt_boxes,
            seed,
        });
    }
    if out.is_empty() {
        return Err(CliError::io(&manifest_path, "manifest lists no images"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gatn_core::synthdata::{gen_dataset, SynthConfig};

    #[test]
    fn write_then_load() {
        let cfg = SynthConfig {
            image_size: 48,
            radius_min: 6.0,
            radius_max: 8.0,
            ..SynthConfig::default()
        };
        let samples = gen_dataset(2, 5, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), &samples).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!((a.label, a.seed), (b.label, b.seed));
            assert_eq!(a.gt_boxes, b.gt_boxes);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_manifest_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dir(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(MANIFEST));
    }

    #[test]
    fn malformed_sidecar() {
        let p = Path::new("x.boxes");
        assert!(parse_boxes(p, "1 2 3").is_err());
        assert!(parse_boxes(p, "5 0 1 4").is_err());
        assert_eq!(parse_boxes(p, "# c\n\n0 1 2 3\n").unwrap(), vec![PixelBox::new(0, 1, 2, 3)]);
    }
}
