//! On-disk corpus: `<root>/<case-id>/{image,gt,score_c,score_s,score_a}.vgf`
//! plus `case.json`, and a `corpus.json` manifest at the root.

use super::{gen_phantom, Case, PhantomSpec, Slab};
use crate::error::{Error, Result};
use crate::fusion::{binarize, majority_vote};
use crate::volgrid::{dsc, read_volume, write_volume};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Per-view score file names inside a case directory, in view order.
pub const SCORE_FILES: [&str; 3] = ["score_c.vgf", "score_s.vgf", "score_a.vgf"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub cases: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("corpus.json")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = Self::path(root);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("cannot read corpus manifest {}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        std::fs::write(Self::path(root), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.cases.iter().filter(|c| c.split == split).map(|c| c.id.clone()).collect()
    }

    /// Generates `n_train + n_test` phantoms under `root`. Case `i` uses the
    /// `i`-th draw of a generator seeded with `seed`.
    pub fn generate(root: &Path, spec: &PhantomSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases = Vec::with_capacity(n_train + n_test);
        for i in 0..n_train + n_test {
            let case_seed = rng.next_u64();
            let mut case = gen_phantom(spec, case_seed)?;
            case.id = format!("case{i:03}");
            write_case(root, &case, case_seed, spec)?;
            let split = if i < n_train { Split::Train } else { Split::Test };
            cases.push(CorpusEntry { id: case.id, split });
            log::info!("generated case {}/{}", i + 1, n_train + n_test);
        }
        let m = Self { seed, spec: spec.clone(), cases };
        m.save(root)?;
        Ok(m)
    }
}

/// Provenance and quality summary stored next to each case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub id: String,
    pub seed: u64,
    pub spec: PhantomSpec,
    /// Dice of each binarized view against the ground truth.
    pub view_dsc: [f64; 3],
    pub mv_dsc: f64,
    pub slabs: Option<[Vec<Slab>; 3]>,
}

pub fn write_case(root: &Path, case: &Case, seed: u64, spec: &PhantomSpec) -> Result<CaseMeta> {
    let dir = root.join(&case.id);
    std::fs::create_dir_all(&dir)?;
    write_volume(&case.image, dir.join("image.vgf"))?;
    write_volume(&case.gt, dir.join("gt.vgf"))?;
    let mut masks = Vec::with_capacity(3);
    for (s, name) in case.scores.iter().zip(SCORE_FILES) {
        write_volume(s, dir.join(name))?;
        masks.push(binarize(s, 0.5)?);
    }
    let view_dsc = [0, 1, 2].map(|v| dsc(&masks[v], &case.gt).unwrap_or(0.0));
    let mv = majority_vote(&masks[0], &masks[1], &masks[2])?;
    let meta = CaseMeta { id: case.id.clone(), seed, spec: spec.clone(), view_dsc, mv_dsc: dsc(&mv, &case.gt)?, slabs: case.slabs.clone() };
    std::fs::write(dir.join("case.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

pub fn read_case(root: &Path, id: &str) -> Result<Case> {
    let dir = root.join(id);
    if !dir.is_dir() {
        return Err(Error::Config(format!("case directory {} is missing", dir.display())));
    }
    let image = read_volume(dir.join("image.vgf"))?;
    let gt = read_volume(dir.join("gt.vgf"))?;
    let [c, s, a] = SCORE_FILES.map(|f| read_volume::<f32>(dir.join(f)));
    let mut case = Case::new(id.to_string(), image, gt, [c?, s?, a?])?;
    if let Ok(text) = std::fs::read_to_string(dir.join("case.json")) {
        let meta: CaseMeta = serde_json::from_str(&text)?;
        case.slabs = meta.slabs;
    }
    Ok(case)
}
