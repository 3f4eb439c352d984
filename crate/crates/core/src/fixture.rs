//! Synthetic dataset with known geometry, used by tests, the acceptance
//! suite and `compdesc fixture`.
//!
//! Each class has a random unit centroid. Images sit at a fixed angle from
//! their centroid, offset along a small per-class variation subspace; the
//! class prompt sits further out, and "true" descriptors at angles drawn
//! from a range, partly along the same subspace. Noise descriptors point in
//! random directions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::catalog::{ClassCatalog, ClassEntry};
use crate::descriptor::{answer_preamble, question, ReplayEntry};
use crate::embedding::EmbeddingMatrix;
use crate::store::{
    self, AssetBundle, DatasetManifest, StoreError, TextEmbeddingPaths, TextEmbeddings,
};
use crate::util::{mix_seed, rng, write_atomic};
use crate::vector::l2_normalize;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub dataset_id: String,
    pub classes: usize,
    pub dims: usize,
    /// Evaluation images per class.
    pub images_per_class: usize,
    /// Support images per class, used for mean features.
    pub support_per_class: usize,
    pub image_angle_deg: f64,
    pub prompt_angle_deg: f64,
    pub true_descriptors: usize,
    pub true_angle_deg: (f64, f64),
    pub noise_descriptors: usize,
    /// Angle between a descriptor prompt and its bare descriptor text.
    pub bare_angle_deg: f64,
    /// Angle between a class prompt and its bare class name.
    pub name_angle_deg: f64,
    /// Dimension of each class's variation subspace: image offsets from the
    /// centroid lie in it. Zero means isotropic offsets.
    pub variation_dims: usize,
    /// Share of a true descriptor's off-centroid direction drawn from the
    /// variation subspace, in [0, 1].
    pub descriptor_variation: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            dataset_id: "synthetic".into(),
            classes: 20,
            dims: 64,
            images_per_class: 32,
            support_per_class: 32,
            image_angle_deg: 15.0,
            prompt_angle_deg: 72.0,
            true_descriptors: 5,
            true_angle_deg: (66.0, 76.0),
            noise_descriptors: 10,
            bare_angle_deg: 20.0,
            name_angle_deg: 10.0,
            variation_dims: 2,
            descriptor_variation: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureDescriptor {
    pub text: String,
    pub noise: bool,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub catalog: ClassCatalog,
    pub centroids: Vec<Vec<f32>>,
    pub texts: TextEmbeddings,
    pub images: EmbeddingMatrix,
    pub support_images: EmbeddingMatrix,
    /// True descriptors first, then noise, per class.
    pub descriptors: BTreeMap<String, Vec<FixtureDescriptor>>,
}

fn gaussian(r: &mut impl Rng, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn random_unit(r: &mut impl Rng, dims: usize) -> Vec<f64> {
    unit(&gaussian(r, dims))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v` with its components along each of the orthonormal `basis` removed.
fn reject(v: &[f64], basis: &[&[f64]]) -> Vec<f64> {
    let mut out = v.to_vec();
    for b in basis {
        let d = dot(&out, b);
        out.iter_mut().zip(*b).for_each(|(o, x)| *o -= d * x);
    }
    out
}

/// Rotates unit `c` by `deg` degrees toward unit `u`, which must be
/// orthogonal to `c`.
fn rotate(c: &[f64], u: &[f64], deg: f64) -> Vec<f64> {
    let (s, co) = deg.to_radians().sin_cos();
    unit(&c.iter().zip(u).map(|(a, b)| co * a + s * b).collect::<Vec<_>>())
}

/// Unit vector at `deg` degrees from unit `c`, in a random direction.
fn at_angle(r: &mut impl Rng, c: &[f64], deg: f64) -> Vec<f64> {
    let u = unit(&reject(&gaussian(r, c.len()), &[c]));
    rotate(c, &u, deg)
}

/// Orthonormal basis of a random `k`-dimensional subspace orthogonal to `c`.
fn subspace(r: &mut impl Rng, c: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut against: Vec<&[f64]> = vec![c];
        against.extend(basis.iter().map(Vec::as_slice));
        let v = unit(&reject(&gaussian(r, c.len()), &against));
        basis.push(v);
    }
    basis
}

/// Random unit direction orthogonal to `c`; a `share` of it (by energy)
/// lies in `basis` when one is given.
fn offset_direction(r: &mut impl Rng, c: &[f64], basis: &[Vec<f64>], share: f64) -> Vec<f64> {
    let free = unit(&reject(&gaussian(r, c.len()), &[c]));
    if basis.is_empty() {
        return free;
    }
    let mut inside = vec![0.0; c.len()];
    for b in basis {
        let g: f64 = r.sample(StandardNormal);
        inside.iter_mut().zip(b).for_each(|(o, x)| *o += g * x);
    }
    let inside = unit(&inside);
    let (a, b) = (share.sqrt(), (1.0 - share).sqrt());
    unit(&inside.iter().zip(&free).map(|(x, y)| a * x + b * y).collect::<Vec<_>>())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    l2_normalize(&v.iter().map(|&x| x as f32).collect::<Vec<_>>()).expect("unit vector")
}

impl Fixture {
    pub fn build(spec: &FixtureSpec) -> Self {
        let classes: Vec<ClassEntry> = (0..spec.classes)
            .map(|i| ClassEntry::new(format!("c{i:02}"), format!("Species {i:02}")))
            .collect();
        let catalog = ClassCatalog::new(spec.dataset_id.clone(), classes).expect("fixture catalog");

        let mut centroids = Vec::new();
        let mut prompts = Vec::new();
        let mut names = Vec::new();
        let mut desc_prompts = Vec::new();
        let mut bare = Vec::new();
        let mut images = Vec::new();
        let mut support = Vec::new();
        let mut descriptors = BTreeMap::new();

        for (ci, class) in catalog.classes().iter().enumerate() {
            // independent streams per class and role
            let mut r = rng(mix_seed(spec.seed, ci as u64));
            let c = random_unit(&mut r, spec.dims);
            let basis = subspace(&mut r, &c, spec.variation_dims);
            let prompt = at_angle(&mut r, &c, spec.prompt_angle_deg);
            let prompt_key = catalog.render_class_prompt(&class.id).expect("class");
            prompts.push((prompt_key, to_f32(&prompt)));
            names.push((class.name.clone(), to_f32(&at_angle(&mut r, &prompt, spec.name_angle_deg))));

            let mut ds = Vec::new();
            for j in 0..spec.true_descriptors + spec.noise_descriptors {
                let noise = j >= spec.true_descriptors;
                let (text, emb) = if noise {
                    (format!("shows artifact {ci:02}-{:02}", j - spec.true_descriptors), random_unit(&mut r, spec.dims))
                } else {
                    let (lo, hi) = spec.true_angle_deg;
                    let deg = if hi > lo { r.random_range(lo..hi) } else { lo };
                    let u = offset_direction(&mut r, &c, &basis, spec.descriptor_variation);
                    (format!("has trait {ci:02}-{j:02}"), rotate(&c, &u, deg))
                };
                let key = catalog.render_descriptor_prompt(&class.id, &text).expect("class");
                desc_prompts.push((key, to_f32(&emb)));
                bare.push((text.clone(), to_f32(&at_angle(&mut r, &emb, spec.bare_angle_deg))));
                ds.push(FixtureDescriptor { text, noise });
            }
            descriptors.insert(class.id.clone(), ds);

            let mut ri = rng(mix_seed(mix_seed(spec.seed, ci as u64), 1));
            for k in 0..spec.images_per_class {
                let u = offset_direction(&mut ri, &c, &basis, 1.0);
                images.push((format!("{}/img_{k:03}", class.id), to_f32(&rotate(&c, &u, spec.image_angle_deg))));
            }
            let mut rs = rng(mix_seed(mix_seed(spec.seed, ci as u64), 2));
            for k in 0..spec.support_per_class {
                let u = offset_direction(&mut rs, &c, &basis, 1.0);
                support.push((format!("{}/sup_{k:03}", class.id), to_f32(&rotate(&c, &u, spec.image_angle_deg))));
            }
            centroids.push(to_f32(&c));
        }

        let m = |rows: Vec<(String, Vec<f32>)>| EmbeddingMatrix::from_rows(spec.dims, rows).expect("fixture matrix");
        Self {
            spec: spec.clone(),
            catalog,
            centroids,
            texts: TextEmbeddings {
                class_prompts: m(prompts),
                class_names: Some(m(names)),
                descriptor_prompts: Some(m(desc_prompts)),
                bare_descriptors: Some(m(bare)),
            },
            images: m(images),
            support_images: m(support),
            descriptors,
        }
    }

    /// Every descriptor per class, noise included.
    pub fn all_descriptors(&self) -> BTreeMap<String, Vec<String>> {
        self.descriptors
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|d| d.text.clone()).collect()))
            .collect()
    }

    /// Only the true descriptors per class.
    pub fn true_descriptors(&self) -> BTreeMap<String, Vec<String>> {
        self.descriptors
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().filter(|d| !d.noise).map(|d| d.text.clone()).collect()))
            .collect()
    }

    pub fn noise_texts(&self) -> BTreeSet<String> {
        self.descriptors
            .values()
            .flatten()
            .filter(|d| d.noise)
            .map(|d| d.text.clone())
            .collect()
    }

    pub fn assets(&self) -> AssetBundle {
        AssetBundle {
            manifest_path: PathBuf::new(),
            dataset_id: self.spec.dataset_id.clone(),
            catalog: self.catalog.clone(),
            texts: self.texts.clone(),
            images: self.images.clone(),
            support_images: Some(self.support_images.clone()),
            mean_source: None,
        }
    }

    /// Recorded answers for every ordered (target, similar) pair. The answer
    /// for a pair lists all of the target's descriptors, rotated by the
    /// similar class's index, so any neighbor choice yields the full set.
    pub fn replay_entries(&self) -> Vec<ReplayEntry> {
        let classes = self.catalog.classes();
        let mut out = Vec::new();
        for target in classes {
            let ds = &self.descriptors[&target.id];
            for (si, similar) in classes.iter().enumerate() {
                if similar.id == target.id {
                    continue;
                }
                let mut lines = vec![answer_preamble(&target.name, &similar.name)];
                for j in 0..ds.len() {
                    lines.push(format!("- {}", ds[(j + si) % ds.len()].text));
                }
                out.push(ReplayEntry {
                    question: question(&target.name, &similar.name),
                    response: lines.join("\n"),
                });
            }
        }
        out
    }

    /// Writes catalog, embedding files, manifest and `replay.jsonl` into
    /// `dir`. Returns the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, StoreError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let id = &self.spec.dataset_id;
        let catalog_path = dir.join(format!("{id}_catalog.json"));
        let json = serde_json::to_vec_pretty(&self.catalog).expect("catalog serializes");
        write_atomic(&catalog_path, &json).map_err(io(&catalog_path))?;

        let files = [
            ("class_prompts", &self.texts.class_prompts),
            ("class_names", self.texts.class_names.as_ref().expect("fixture names")),
            ("descriptor_prompts", self.texts.descriptor_prompts.as_ref().expect("fixture prompts")),
            ("bare_descriptors", self.texts.bare_descriptors.as_ref().expect("fixture bare")),
            ("images", &self.images),
            ("support", &self.support_images),
        ];
        for (name, m) in files {
            store::write_matrix(&dir.join(format!("{id}_{name}.cdem")), m)?;
        }
        let rel = |name: &str| PathBuf::from(format!("{id}_{name}.cdem"));
        let manifest = DatasetManifest {
            dataset_id: id.clone(),
            catalog: PathBuf::from(format!("{id}_catalog.json")),
            text_embeddings: TextEmbeddingPaths {
                class_prompts: rel("class_prompts"),
                class_names: Some(rel("class_names")),
                descriptor_prompts: Some(rel("descriptor_prompts")),
                bare_descriptors: Some(rel("bare_descriptors")),
            },
            images: rel("images"),
            support_images: Some(rel("support")),
            mean_source: None,
            mean_source_manifest: None,
        };
        let manifest_path = dir.join(format!("{id}.manifest.json"));
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&manifest_path, &json).map_err(io(&manifest_path))?;

        let mut replay = Vec::new();
        for e in self.replay_entries() {
            serde_json::to_writer(&mut replay, &e).expect("entry serializes");
            replay.push(b'\n');
        }
        let replay_path = dir.join("replay.jsonl");
        write_atomic(&replay_path, &replay).map_err(io(&replay_path))?;
        Ok(manifest_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::{cosine, norm};

    #[test]
    fn geometry_matches_spec() {
        let f = Fixture::build(&FixtureSpec::default());
        assert_eq!(f.catalog.len(), 20);
        assert_eq!(f.images.len(), 20 * 32);
        assert_eq!(f.support_images.len(), 20 * 32);
        assert_eq!(f.noise_texts().len(), 200);
        assert_eq!(f.true_descriptors().values().map(Vec::len).sum::<usize>(), 100);
        for (ci, class) in f.catalog.classes().iter().enumerate() {
            let c = &f.centroids[ci];
            for &i in &f.images.group_by_class()[&class.id] {
                let a = cosine(f.images.row(i), c).unwrap().acos().to_degrees();
                assert!((a - 15.0).abs() < 1e-3, "{a}");
            }
            let p = f.texts.class_prompts.get(&f.catalog.render_class_prompt(&class.id).unwrap()).unwrap();
            assert!((cosine(p, c).unwrap().acos().to_degrees() - 72.0).abs() < 1e-3);
            assert!((norm(p) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn build_is_deterministic_and_seeded() {
        let a = Fixture::build(&FixtureSpec::default());
        let b = Fixture::build(&FixtureSpec::default());
        assert_eq!(store::encode(&a.images), store::encode(&b.images));
        let c = Fixture::build(&FixtureSpec {
            seed: 1,
            ..FixtureSpec::default()
        });
        assert_ne!(store::encode(&a.images), store::encode(&c.images));
    }

    #[test]
    fn written_fixture_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture::build(&FixtureSpec {
            classes: 4,
            dims: 16,
            images_per_class: 3,
            support_per_class: 2,
            ..FixtureSpec::default()
        });
        let manifest = f.write_to(dir.path()).unwrap();
        let bundle = store::resolve_assets(&manifest).unwrap();
        assert_eq!(bundle.catalog, f.catalog);
        assert_eq!(bundle.images, f.images);
        assert_eq!(bundle.filter_images(), &f.support_images);
        let replay = std::fs::read_to_string(dir.path().join("replay.jsonl")).unwrap();
        assert_eq!(replay.lines().count(), 4 * 3);
    }
}
