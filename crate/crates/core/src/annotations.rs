//! Bounding-box annotations pairing noises with where objects appeared.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Side;
use crate::rng;
use crate::tensor::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Image,
    Latent,
}

impl Space {
    pub fn name(self) -> &'static str {
        match self {
            Space::Image => "image",
            Space::Latent => "latent",
        }
    }
}

/// One detected object. Coordinates are half-open, in the units of `space`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBoxAnnotation {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(rename = "class")]
    pub class_name: String,
    pub score: f64,
    pub prompt_id: String,
    pub space: Space,
}

impl BBoxAnnotation {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2, self.score]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::SchemaViolation(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::SchemaViolation(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn expect_space(&self, space: Space) -> Result<()> {
        if self.space == space {
            Ok(())
        } else {
            Err(Error::WrongSpace {
                expected: space.name(),
                actual: self.space.name(),
            })
        }
    }

    /// Integer latent cells covered by this box, clipped at zero.
    pub fn to_region(&self) -> Result<Region> {
        self.expect_space(Space::Latent)?;
        let lo = |v: f64| v.floor().max(0.0) as usize;
        let hi = |v: f64| v.ceil().max(0.0) as usize;
        Region::new(lo(self.x1), lo(self.y1), hi(self.x2), hi(self.y2))
    }

    fn sort_key(&self) -> (f64, f64, f64, f64, &str) {
        (self.x1, self.y1, self.x2, self.y2, &self.prompt_id)
    }
}

/// Maps an image-space box to latent cells: divide by `image_size / latent_size`,
/// floor the low corner and ceil the high corner so the result covers the original.
pub fn rescale_to_latent(
    b: &BBoxAnnotation,
    image_size: u32,
    latent_size: u32,
) -> Result<BBoxAnnotation> {
    b.expect_space(Space::Image)?;
    if latent_size == 0 || !image_size.is_multiple_of(latent_size) {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} is not a multiple of latent size {latent_size}"
        )));
    }
    let s = f64::from(image_size / latent_size);
    let max = f64::from(latent_size);
    let lo = |v: f64| (v / s).floor().clamp(0.0, max);
    let hi = |v: f64| (v / s).ceil().clamp(0.0, max);
    Ok(BBoxAnnotation {
        x1: lo(b.x1),
        y1: lo(b.y1),
        x2: hi(b.x2),
        y2: hi(b.y2),
        space: Space::Latent,
        ..b.clone()
    })
}

/// Highest-scoring box of `class_name` with `score > min_score`.
///
/// Ties on score resolve to the lexicographically smallest box so the result
/// does not depend on input order.
pub fn filter_best<'a>(
    annotations: impl IntoIterator<Item = &'a BBoxAnnotation>,
    class_name: &str,
    min_score: f64,
) -> Option<&'a BBoxAnnotation> {
    annotations
        .into_iter()
        .filter(|a| a.class_name == class_name && a.score > min_score)
        .min_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| {
                let (ka, kb) = (a.sort_key(), b.sort_key());
                ka.0.total_cmp(&kb.0)
                    .then(ka.1.total_cmp(&kb.1))
                    .then(ka.2.total_cmp(&kb.2))
                    .then(ka.3.total_cmp(&kb.3))
                    .then(ka.4.cmp(kb.4))
            })
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub noise_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub annotations: Vec<BBoxAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInfo {
    pub text: String,
    #[serde(rename = "class")]
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    #[serde(rename = "class")]
    pub class_name: String,
}

impl Prompt {
    fn new(id: impl Into<String>, text: &str, class_name: &str) -> Self {
        Prompt {
            id: id.into(),
            text: text.to_owned(),
            class_name: class_name.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    #[serde(default = "default_latent_size")]
    pub latent_size: u32,
    #[serde(default)]
    pub prompts: BTreeMap<String, PromptInfo>,
    pub records: Vec<NoiseRecord>,
}

fn default_image_size() -> u32 {
    512
}

fn default_latent_size() -> u32 {
    64
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            image_size: default_image_size(),
            latent_size: default_latent_size(),
            prompts: prompt_map(&dataset_prompts()),
            records: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0 || !self.image_size.is_multiple_of(self.latent_size) {
            return Err(Error::SchemaViolation(format!(
                "image_size {} is not divisible by latent_size {}",
                self.image_size, self.latent_size
            )));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.noise_id.as_str()) {
                return Err(Error::DuplicateNoiseId(r.noise_id.clone()));
            }
            for a in &r.annotations {
                a.validate()?;
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> u32 {
        self.image_size / self.latent_size
    }

    pub fn record(&self, noise_id: &str) -> Option<&NoiseRecord> {
        self.records.iter().find(|r| r.noise_id == noise_id)
    }

    /// Every annotation of `record` in latent cells.
    pub fn latent_boxes(&self, record: &NoiseRecord) -> Result<Vec<BBoxAnnotation>> {
        record
            .annotations
            .iter()
            .map(|a| match a.space {
                Space::Latent => Ok(a.clone()),
                Space::Image => rescale_to_latent(a, self.image_size, self.latent_size),
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reassigns annotation lists by a uniformly random permutation of records.
pub fn permute_annotations(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let n = manifest.records.len();
    if n < 2 {
        return Err(Error::TooFewRecords { needed: 2, have: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::chacha(seed));
    let mut out = manifest.clone();
    for (record, &src) in out.records.iter_mut().zip(&order) {
        record.annotations = manifest.records[src].annotations.clone();
    }
    Ok(out)
}

/// Keeps only the prompts of one class and the annotations made for them.
pub fn restrict_to_class(manifest: &DatasetManifest, class_name: &str) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    out.prompts.retain(|_, info| info.class_name == class_name);
    if out.prompts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no prompt of class `{class_name}`"
        )));
    }
    for r in &mut out.records {
        r.annotations
            .retain(|a| out.prompts.contains_key(&a.prompt_id));
    }
    Ok(out)
}

pub fn prompt_map(prompts: &[Prompt]) -> BTreeMap<String, PromptInfo> {
    prompts
        .iter()
        .map(|p| {
            (
                p.id.clone(),
                PromptInfo {
                    text: p.text.clone(),
                    class_name: p.class_name.clone(),
                },
            )
        })
        .collect()
}

const DATASET_PROMPTS: [(&str, [&str; 5]); 5] = [
    (
        "baseball glove",
        [
            "The baseball glove waits by the fence.",
            "A young athlete breaks in a new baseball glove.",
            "A baseball glove rests on the dugout bench.",
            "His baseball glove hangs by the door.",
            "A baseball glove is left on the fence during practice.",
        ],
    ),
    (
        "bear",
        [
            "A grizzly bear fishes in a rushing river.",
            "A bear cub explores the forest with curiosity.",
            "A bear catches a fish in the river.",
            "A black bear forages for berries in the woods.",
            "A bear sniffs the forest floor.",
        ],
    ),
    (
        "handbag",
        [
            "A fashionable handbag complements an elegant outfit.",
            "A woman carries a stylish handbag on her shoulder.",
            "A handbag rests on a cafe table during lunch.",
            "A handbag holds essentials for a day of shopping.",
            "A handbag adds a pop of color to a monochrome look.",
        ],
    ),
    (
        "sports ball",
        [
            "A sports ball is caught in a fence.",
            "A sports ball lies forgotten under a tree.",
            "A sports ball sits on a sandy beach.",
            "A sports ball rests on a grassy land.",
            "A sports ball stands out on a muddy field.",
        ],
    ),
    (
        "stop sign",
        [
            "A red stop sign halts traffic at an intersection.",
            "A stop sign stands alone on a country road.",
            "A stop sign is covered in a layer of snow.",
            "A stop sign is adorned with event flyers.",
            "A stop sign stands at the entrance to a neighborhood.",
        ],
    ),
];

/// The 25 single-object prompts (5 classes x 5 sentences) used to build datasets.
pub fn dataset_prompts() -> Vec<Prompt> {
    DATASET_PROMPTS
        .iter()
        .flat_map(|(class, texts)| {
            texts.iter().enumerate().map(move |(i, text)| {
                Prompt::new(
                    format!("{}-{}", class.replace(' ', "_"), i + 1),
                    text,
                    class,
                )
            })
        })
        .collect()
}

/// The 10 scene prompts used to measure positional diversity.
pub fn diversity_prompts() -> Vec<Prompt> {
    [
        ("The golden sunlight filters through the dense canopy of the forest, casting dappled shadows on the moss-covered ground.", "potted plant"),
        ("A red bicycle leans against a gnarled oak tree, its wheels slightly caked with mud from the morning's ride.", "bicycle"),
        ("Nearby, a picnic table is set with a checkered cloth, and atop it rests a basket filled with fresh fruit and sandwiches.", "dining table"),
        ("A frisbee lies forgotten on the grass, a few feet away from a sleeping dog with its fur glistening in the sun.", "frisbee"),
        ("In the background, a kite dances in the sky, its bright colors a stark contrast against the blue expanse above.", "kite"),
        ("A laptop is open on the table, displaying vibrant images of nature, momentarily abandoned for the allure of the outdoors.", "laptop"),
        ("A baseball glove and ball sit on the bench, remnants of a game played in the spirit of friendly competition.", "baseball glove"),
        ("A traffic cone marks the end of a nearby trail, signaling caution to the cyclists and hikers passing by.", "traffic cone"),
        ("A fire hydrant stands at the edge of the clearing, its red paint chipped but vibrant, a silent guardian of safety.", "fire hydrant"),
        ("As the day wanes, the street lights begin to flicker on, their glow adding a soft luminescence to the tranquil scene.", "traffic light"),
    ]
    .iter()
    .enumerate()
    .map(|(i, (text, class))| Prompt::new(format!("scene-{:02}", i + 1), text, class))
    .collect()
}

/// The five positional prompts for one side.
pub fn guidance_prompts(side: Side) -> Vec<Prompt> {
    let word = side.name();
    [
        ("a sports ball", "sports ball"),
        ("a cow", "cow"),
        ("an apple", "apple"),
        ("a bicycle", "bicycle"),
        ("a vase", "vase"),
    ]
    .iter()
    .map(|(noun, class)| {
        Prompt::new(
            format!("{}-{word}", class.replace(' ', "_")),
            &format!("{noun} in the {word}"),
            class,
        )
    })
    .collect()
}
