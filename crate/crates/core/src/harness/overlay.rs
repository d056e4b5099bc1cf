//! Box overlays as binary PPM images and the localization listing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::SplitData;
use crate::encoder::FeatureExtractor;
use crate::error::{shape_err, Error, Result};
use crate::localization::{self, BoundingBox, LocalizeConfig};
use crate::ops;
use crate::tensor::Tensor;

pub const BORDER: [u8; 3] = [255, 0, 0];

/// Encodes `image` (values in [0,1]) as P6 with a one-pixel red border
/// along the perimeter of `bbox`.
pub fn overlay_ppm(image: &Tensor, bbox: &BoundingBox) -> Result<Vec<u8>> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(shape_err!("overlay needs an RGB image, got {c} channels"));
    }
    bbox.validate(h, w)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let on_edge = bbox.contains(y, x) && (y == bbox.y0 || y == bbox.y1 || x == bbox.x0 || x == bbox.x1);
            if on_edge {
                out.extend_from_slice(&BORDER);
            } else {
                out.extend((0..3).map(|ch| (image.at3(y, x, ch).clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
    }
    Ok(out)
}

/// One localized image.
#[derive(Clone, Debug, PartialEq)]
pub struct Localized {
    pub id: usize,
    pub bbox: BoundingBox,
    pub iou: f64,
    pub overlay: PathBuf,
}

/// Localizes each image against its own embedding, writes
/// `{split}_{id}.ppm` overlays and `boxes.txt` (`id y0 x0 y1 x1 iou`) into
/// `out_dir`.
pub fn localize_cmd<F: FeatureExtractor + ?Sized>(
    extractor: &F,
    split: &SplitData,
    ids: &[usize],
    localize: LocalizeConfig,
    out_dir: &Path,
) -> Result<Vec<Localized>> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= split.len()) {
        return Err(Error::UnknownId(bad));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut listing = String::new();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let image = &split.images[id];
        let (h, w, _) = image.dims3()?;
        let fm = extractor.feature_map(image)?;
        let rep = ops::global_avg_pool(&fm)?;
        let bbox = localization::propose_box_with(&fm, &rep, localize, h, w)?;
        let iou = bbox.iou(&split.boxes[id]);
        let path = out_dir.join(format!("{}_{id}.ppm", split.name));
        fs::write(&path, overlay_ppm(image, &bbox)?).map_err(|e| Error::io(&path, e))?;
        writeln!(listing, "{id} {} {} {} {} {iou:.6}", bbox.y0, bbox.x0, bbox.y1, bbox.x1).expect("string write");
        out.push(Localized {
            id,
            bbox,
            iou,
            overlay: path,
        });
    }
    let path = out_dir.join("boxes.txt");
    fs::write(&path, listing).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render_split, DatasetSpec};
    use crate::encoder::{EncoderArch, EncoderParams};

    fn parse_ppm(bytes: &[u8]) -> (usize, usize, &[u8]) {
        let header_end = bytes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(2)
            .unwrap()
            .0;
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut parts = header.split_whitespace();
        assert_eq!(parts.next(), Some("P6"));
        let w: usize = parts.next().unwrap().parse().unwrap();
        let h: usize = parts.next().unwrap().parse().unwrap();
        assert_eq!(parts.next(), Some("255"));
        (h, w, &bytes[header_end + 1..])
    }

    #[test]
    fn border_is_exact() {
        let image = Tensor::from_fn(&[10, 12, 3], |i| ((i[0] + i[1] + i[2]) % 5) as f64 / 5.0);
        let b = BoundingBox::new(2, 3, 7, 9);
        let bytes = overlay_ppm(&image, &b).unwrap();
        let (h, w, px) = parse_ppm(&bytes);
        assert_eq!((h, w), (10, 12));
        assert_eq!(px.len(), 10 * 12 * 3);
        for y in 0..h {
            for x in 0..w {
                let p = &px[(y * w + x) * 3..][..3];
                let perimeter = (2..=7).contains(&y) && (3..=9).contains(&x) && (y == 2 || y == 7 || x == 3 || x == 9);
                if perimeter {
                    assert_eq!(p, BORDER);
                } else {
                    let want: Vec<u8> = (0..3).map(|c| (image.at3(y, x, c) * 255.0).round() as u8).collect();
                    assert_eq!(p, &want[..]);
                }
            }
        }
        assert!(overlay_ppm(&image, &BoundingBox::new(0, 0, 10, 3)).is_err());
    }

    #[test]
    fn listing_matches_propose_box() {
        let spec = DatasetSpec {
            image_size: 16,
            per_class_count: 3,
            ..DatasetSpec::default()
        };
        let split = render_split(&spec, 2, "val").unwrap();
        let arch = EncoderArch {
            blocks: 2,
            channels: vec![4, 6],
            kernel: 3,
            input_size: 16,
            input_channels: 3,
        };
        let params = EncoderParams::init(&arch, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = LocalizeConfig::with_tau(0.5);
        let got = localize_cmd(&params, &split, &[4, 0], cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("boxes.txt")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for (line, l) in lines.iter().zip(&got) {
            let fm = params.feature_map(&split.images[l.id]).unwrap();
            let rep = ops::global_avg_pool(&fm).unwrap();
            let want = localization::propose_box(&fm, &rep, 0.5, 16, 16).unwrap();
            assert_eq!(l.bbox, want);
            let f: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(f[0].parse::<usize>().unwrap(), l.id);
            let coords: Vec<usize> = f[1..5].iter().map(|v| v.parse().unwrap()).collect();
            assert_eq!(coords, vec![want.y0, want.x0, want.y1, want.x1]);
            let bytes = fs::read(&l.overlay).unwrap();
            let (h, w, _) = parse_ppm(&bytes);
            assert_eq!((h, w), (16, 16));
        }
        assert!(matches!(
            localize_cmd(&params, &split, &[99], cfg, dir.path()),
            Err(Error::UnknownId(99))
        ));
    }
}
