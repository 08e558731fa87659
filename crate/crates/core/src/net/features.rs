use std::path::Path;

use super::{Stream, TwoStreamModel};
use crate::error::Result;
use crate::imageio::Image;
use crate::tensor::Graph;

/// One row per spatial location of every encoder tap: `stream, level, y, x, c0, c1, ...`.
/// Rows of different levels have different lengths.
pub fn write_feature_csv(model: &TwoStreamModel, image: &Image, path: &Path) -> Result<()> {
    let g = Graph::new();
    let bound = model.bind(&g, false);
    let x = g.constant(image.to_rgb().to_tensor());
    let widest = *model.config.channels.iter().max().unwrap_or(&0);
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    let mut header: Vec<String> = ["stream", "level", "y", "x"].iter().map(|s| s.to_string()).collect();
    header.extend((0..widest).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for s in [Stream::Albedo, Stream::Shading] {
        for (level, tap) in bound.encode(x, s)?.iter().enumerate() {
            let shape = tap.shape();
            let (c, h, wd) = (shape[0], shape[1], shape[2]);
            let data = tap.data();
            for y in 0..h {
                for xx in 0..wd {
                    let mut row = vec![s.name().to_string(), (level + 1).to_string(), y.to_string(), xx.to_string()];
                    row.extend((0..c).map(|ch| data[ch * h * wd + y * wd + xx].to_string()));
                    w.write_record(&row)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::ColorSpace;
    use crate::net::NetConfig;

    #[test]
    fn one_row_per_location() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig {
            channels: vec![2, 3],
            fuse_channels: 2,
            zero_init_output: false,
        };
        let model = TwoStreamModel::new(cfg, 1).unwrap();
        let img = Image::filled(4, 4, 3, 0.5, ColorSpace::Srgb);
        let p = dir.path().join("f.csv");
        write_feature_csv(&model, &img, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * (16 + 4));
        assert_eq!(lines[1].split(',').count(), 4 + 2);
        assert!(lines.last().unwrap().starts_with("shading,2,1,1,"));
    }
}
