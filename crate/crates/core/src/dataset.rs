//! Images and ground truth loaded from an annotation file.

use std::path::Path;

use crate::annotations::{base_dir, read_annotations};
use crate::error::Result;
use crate::image::Image;
use crate::seqcodec::TextInstance;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub instances: Vec<TextInstance>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Load every annotated image, fitted onto a `side` square canvas with
    /// polygons scaled to match.
    pub fn load(annotations: &Path, side: usize) -> Result<Self> {
        let base = base_dir(annotations);
        let lines = read_annotations(annotations)?;
        let mut samples = Vec::with_capacity(lines.len());
        for line in lines {
            let raw = Image::load_gray(&line.image_path(&base))?;
            let (image, scale) = raw.fit_square(side);
            let instances = line
                .instances
                .into_iter()
                .map(|mut t| {
                    t.polygon.iter_mut().for_each(|p| *p = [p[0] * scale, p[1] * scale]);
                    t
                })
                .collect();
            samples.push(Sample { name: line.image, image, instances });
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
