//! Dataset ingest and fixtures: edge-list parsing with dense id remapping,
//! a planted-community synthetic generator, and the fake-edge injector used
//! by the robustness harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{InteractionMatrix, SocialMatrix};
use crate::rng::stream_rng;

/// A parsed dataset: interactions, social edges, and the id remap tables
/// (dense id -> original id) retained for provenance.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub interactions: InteractionMatrix,
    pub social: SocialMatrix,
    pub provenance: String,
    pub user_map: Vec<u64>,
    pub item_map: Vec<u64>,
}

fn parse_edge_file(path: &Path) -> Result<Vec<(u64, u64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u64> {
            tok.and_then(|t| t.parse::<u64>().ok()).ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: malformed edge line '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let a = parse(it.next())?;
        let b = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Data(format!(
                "{}:{}: expected two ids, got extra tokens in '{line}'",
                path.display(),
                lineno + 1
            )));
        }
        out.push((a, b));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no edges found", path.display())));
    }
    Ok(out)
}

/// Load a dataset from two edge-list files: `user item` interaction lines
/// and `user user` trust lines. Ids are remapped densely (sorted original
/// order); duplicate lines collapse; the social set is symmetrized.
/// Self-trust lines are dropped since the social matrix forbids loops.
pub fn load_edge_lists(interactions_path: &Path, social_path: &Path) -> Result<DatasetBundle> {
    let raw_inter = parse_edge_file(interactions_path)?;
    let raw_social = parse_edge_file(social_path)?;

    let mut user_ids: BTreeSet<u64> = BTreeSet::new();
    let mut item_ids: BTreeSet<u64> = BTreeSet::new();
    for &(u, v) in &raw_inter {
        user_ids.insert(u);
        item_ids.insert(v);
    }
    for &(a, b) in &raw_social {
        user_ids.insert(a);
        user_ids.insert(b);
    }
    let user_map: Vec<u64> = user_ids.iter().copied().collect();
    let item_map: Vec<u64> = item_ids.iter().copied().collect();
    let user_index = |id: u64| user_map.binary_search(&id).expect("user id indexed");
    let item_index = |id: u64| item_map.binary_search(&id).expect("item id indexed");

    let interactions = InteractionMatrix::from_pairs(
        user_map.len(),
        item_map.len(),
        raw_inter.iter().map(|&(u, v)| (user_index(u), item_index(v))),
    )?;
    let mut dropped_loops = 0usize;
    let social_edges: Vec<(usize, usize)> = raw_social
        .iter()
        .filter(|&&(a, b)| {
            if a == b {
                dropped_loops += 1;
                false
            } else {
                true
            }
        })
        .map(|&(a, b)| (user_index(a), user_index(b)))
        .collect();
    let social = SocialMatrix::from_edges(user_map.len(), social_edges)?;

    let mut provenance = format!(
        "interactions={} social={}",
        interactions_path.display(),
        social_path.display()
    );
    if dropped_loops > 0 {
        let _ = write!(provenance, " dropped_self_loops={dropped_loops}");
    }
    let name = interactions_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(DatasetBundle { name, interactions, social, provenance, user_map, item_map })
}

/// Write a bundle back out as the two edge-list files (dense ids).
pub fn write_edge_lists(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut inter = String::new();
    for &(u, v) in bundle.interactions.pairs() {
        let _ = writeln!(inter, "{u}\t{v}");
    }
    std::fs::write(dir.join("interactions.txt"), inter)?;
    let mut social = String::new();
    for &(a, b) in bundle.social.edges() {
        let _ = writeln!(social, "{a}\t{b}");
    }
    std::fs::write(dir.join("social.txt"), social)?;
    Ok(())
}

/// Parameters of the planted-community synthetic fixture.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub communities: usize,
    /// Social edge probability within a community.
    pub intra_p: f64,
    /// Social edge probability across communities.
    pub inter_p: f64,
    /// Size of each community's item pool.
    pub items_per_community: usize,
    /// Interactions drawn from the user's own pool.
    pub pool_interactions: usize,
    /// Extra interactions drawn uniformly over all items.
    pub noise_interactions: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 400,
            communities: 4,
            intra_p: 0.1,
            inter_p: 0.005,
            items_per_community: 80,
            pool_interactions: 5,
            noise_interactions: 1,
            seed: 0,
        }
    }
}

/// Generate a dataset with planted homophily: users are partitioned into
/// communities, social edges prefer the community, and each user interacts
/// with its community's item pool plus uniform noise items.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    if spec.communities < 2 {
        return Err(Error::Config("need at least 2 communities".into()));
    }
    if !(0.0..=1.0).contains(&spec.intra_p) || !(0.0..=1.0).contains(&spec.inter_p) {
        return Err(Error::Config("edge probabilities must lie in [0, 1]".into()));
    }
    if spec.communities * spec.items_per_community > spec.num_items {
        return Err(Error::Config(format!(
            "{} communities x {} pool items exceed {} items",
            spec.communities, spec.items_per_community, spec.num_items
        )));
    }
    if spec.num_users < spec.communities {
        return Err(Error::Config("need at least one user per community".into()));
    }

    let mut rng = stream_rng(spec.seed, "synthetic");
    let community_of = |u: usize| u % spec.communities;

    let mut social_edges = Vec::new();
    for a in 0..spec.num_users {
        for b in (a + 1)..spec.num_users {
            let p = if community_of(a) == community_of(b) { spec.intra_p } else { spec.inter_p };
            if rng.random::<f64>() < p {
                social_edges.push((a, b));
            }
        }
    }

    let mut pairs = Vec::new();
    for u in 0..spec.num_users {
        let c = community_of(u);
        let pool_start = c * spec.items_per_community;
        let mut pool: Vec<usize> =
            (pool_start..pool_start + spec.items_per_community).collect();
        pool.shuffle(&mut rng);
        for &item in pool.iter().take(spec.pool_interactions) {
            pairs.push((u, item));
        }
        for _ in 0..spec.noise_interactions {
            pairs.push((u, rng.random_range(0..spec.num_items)));
        }
    }

    let interactions = InteractionMatrix::from_pairs(spec.num_users, spec.num_items, pairs)?;
    let social = SocialMatrix::from_edges(spec.num_users, social_edges)?;
    Ok(DatasetBundle {
        name: "synthetic".to_string(),
        interactions,
        social,
        provenance: format!(
            "synthetic users={} items={} K={} intra_p={} inter_p={} seed={}",
            spec.num_users, spec.num_items, spec.communities, spec.intra_p, spec.inter_p,
            spec.seed
        ),
        user_map: (0..spec.num_users as u64).collect(),
        item_map: (0..spec.num_items as u64).collect(),
    })
}

/// Replace `floor(ratio * |edges|)` genuine undirected social edges with
/// uniformly sampled fake pairs. The edge count is preserved; fakes are
/// disjoint from the original edge set and never self-loops.
pub fn inject_social_noise(sm: &SocialMatrix, ratio: f64, seed: u64) -> Result<SocialMatrix> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio {ratio} outside [0, 1)")));
    }
    let n = sm.num_users;
    let edges = sm.edges();
    let k = (ratio * edges.len() as f64).floor() as usize;
    if k == 0 {
        return SocialMatrix::from_edges(n, edges.iter().copied());
    }
    let max_edges = n * (n - 1) / 2;
    if edges.len() + k > max_edges {
        return Err(Error::Data(format!(
            "graph too dense to add {k} fake edges ({} of {max_edges} pairs used)",
            edges.len()
        )));
    }

    let mut rng = stream_rng(seed, "social-noise");
    let mut keep: Vec<(usize, usize)> = edges.to_vec();
    keep.shuffle(&mut rng);
    keep.truncate(edges.len() - k);

    let original: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    let mut chosen: BTreeSet<(usize, usize)> = keep.iter().copied().collect();
    let mut added = 0;
    while added < k {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let e = (a.min(b), a.max(b));
        if original.contains(&e) || chosen.contains(&e) {
            continue;
        }
        chosen.insert(e);
        added += 1;
    }
    SocialMatrix::from_edges(n, chosen.into_iter())
}

/// Histogram of cosine similarities over connected user pairs, bin width
/// 0.1 on [-1, 1].
#[derive(Debug, Clone)]
pub struct SimilarityHistogram {
    pub counts: [usize; 20],
    pub total: usize,
}

impl SimilarityHistogram {
    /// Fraction of connected pairs with similarity below the threshold.
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let mut acc = 0usize;
        for (bin, &c) in self.counts.iter().enumerate() {
            let hi = -1.0 + 0.1 * (bin as f64 + 1.0);
            if hi <= threshold {
                acc += c;
            }
        }
        acc as f64 / self.total as f64
    }

    pub fn render(&self) -> String {
        let mut out = String::from("bin_lo\tbin_hi\tcount\n");
        for (bin, &c) in self.counts.iter().enumerate() {
            let lo = -1.0 + 0.1 * bin as f64;
            let _ = writeln!(out, "{lo:.1}\t{:.1}\t{c}", lo + 0.1);
        }
        out
    }
}

/// Cosine-similarity histogram over the social edges, computed from user
/// embeddings (one row per user).
pub fn similarity_histogram(embeddings: &Array2<f64>, sm: &SocialMatrix) -> SimilarityHistogram {
    let mut counts = [0usize; 20];
    let mut total = 0usize;
    for &(a, b) in sm.edges() {
        let x = embeddings.row(a);
        let y = embeddings.row(b);
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let cos = x.dot(&y) / (nx * ny);
        let bin = (((cos + 1.0) / 0.1).floor() as isize).clamp(0, 19) as usize;
        counts[bin] += 1;
        total += 1;
    }
    SimilarityHistogram { counts, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_and_remaps_small_files() {
        let inter = write_temp("0 5\n0 7\n");
        let social = write_temp("0 9\n");
        let bundle = load_edge_lists(inter.path(), social.path()).unwrap();
        // users 0 and 9 (9 appears only in the social file), items 5 and 7
        assert_eq!(bundle.interactions.num_users, 2);
        assert_eq!(bundle.interactions.num_items, 2);
        assert_eq!(bundle.interactions.num_interactions(), 2);
        assert_eq!(bundle.user_map, vec![0, 9]);
        assert_eq!(bundle.item_map, vec![5, 7]);
    }

    #[test]
    fn duplicate_lines_collapse() {
        let inter = write_temp("3 4\n3 4\n3 4\n");
        let social = write_temp("3 8\n8 3\n");
        let bundle = load_edge_lists(inter.path(), social.path()).unwrap();
        assert_eq!(bundle.interactions.num_interactions(), 1);
        assert_eq!(bundle.social.num_edges(), 1);
    }

    #[test]
    fn malformed_line_reports_position() {
        let inter = write_temp("1 2\nnot an edge\n");
        let social = write_temp("1 2\n");
        let err = load_edge_lists(inter.path(), social.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "error was: {err}");
    }

    #[test]
    fn empty_file_rejected() {
        let inter = write_temp("# only a comment\n");
        let social = write_temp("1 2\n");
        assert!(load_edge_lists(inter.path(), social.path()).is_err());
    }

    #[test]
    fn remap_is_a_bijection() {
        let inter = write_temp("10 100\n20 200\n30 100\n");
        let social = write_temp("10 20\n20 30\n");
        let bundle = load_edge_lists(inter.path(), social.path()).unwrap();
        // inverse map restores originals
        let mut seen_users: Vec<u64> = bundle.user_map.clone();
        seen_users.dedup();
        assert_eq!(seen_users.len(), bundle.user_map.len());
        assert_eq!(bundle.user_map, vec![10, 20, 30]);
        assert_eq!(bundle.item_map, vec![100, 200]);
    }

    #[test]
    fn roundtrip_via_written_edge_lists() {
        let spec = SyntheticSpec {
            num_users: 30,
            num_items: 40,
            items_per_community: 8,
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_edge_lists(&bundle, dir.path()).unwrap();
        let back = load_edge_lists(
            &dir.path().join("interactions.txt"),
            &dir.path().join("social.txt"),
        )
        .unwrap();
        // unobserved ids compact on reload; the retained remap tables must
        // restore the originals exactly
        let restored_pairs: Vec<(usize, usize)> = back
            .interactions
            .pairs()
            .iter()
            .map(|&(u, v)| (back.user_map[u] as usize, back.item_map[v] as usize))
            .collect();
        assert_eq!(restored_pairs, bundle.interactions.pairs());
        let restored_social: Vec<(usize, usize)> = back
            .social
            .edges()
            .iter()
            .map(|&(a, b)| (back.user_map[a] as usize, back.user_map[b] as usize))
            .collect();
        assert_eq!(restored_social, bundle.social.edges());
    }

    #[test]
    fn synthetic_disconnected_blocks_when_inter_zero() {
        let spec = SyntheticSpec {
            num_users: 40,
            communities: 4,
            intra_p: 0.5,
            inter_p: 0.0,
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        for &(a, b) in bundle.social.edges() {
            assert_eq!(a % 4, b % 4, "edge ({a},{b}) crosses communities");
        }
    }

    #[test]
    fn synthetic_null_fixture_has_cross_edges() {
        let spec = SyntheticSpec {
            num_users: 60,
            communities: 4,
            intra_p: 0.2,
            inter_p: 0.2,
            seed: 3,
            ..Default::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        let cross = bundle.social.edges().iter().filter(|&&(a, b)| a % 4 != b % 4).count();
        assert!(cross > 0);
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        assert!(generate_synthetic(&SyntheticSpec {
            communities: 1,
            ..Default::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            intra_p: 1.5,
            ..Default::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            num_items: 10,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn noise_injection_identity_at_zero() {
        let sm = SocialMatrix::from_edges(10, [(0, 1), (2, 3), (4, 5)]).unwrap();
        let out = inject_social_noise(&sm, 0.0, 7).unwrap();
        assert_eq!(out.edges(), sm.edges());
    }

    #[test]
    fn noise_injection_preserves_count_and_replaces_half() {
        let edges: Vec<(usize, usize)> = (0..10).map(|i| (i, i + 10)).collect();
        let sm = SocialMatrix::from_edges(20, edges).unwrap();
        let out = inject_social_noise(&sm, 0.5, 7).unwrap();
        assert_eq!(out.num_edges(), 10);
        let original: BTreeSet<_> = sm.edges().iter().copied().collect();
        let kept = out.edges().iter().filter(|e| original.contains(e)).count();
        assert_eq!(kept, 5, "exactly 5 genuine edges must remain");
    }

    #[test]
    fn injected_edges_disjoint_from_original_over_seeds() {
        let edges: Vec<(usize, usize)> = (0..20).map(|i| (i, (i + 1) % 21)).collect();
        let sm = SocialMatrix::from_edges(21, edges).unwrap();
        let original: BTreeSet<_> = sm.edges().iter().copied().collect();
        for seed in 0..100 {
            let out = inject_social_noise(&sm, 0.4, seed).unwrap();
            assert_eq!(out.num_edges(), sm.num_edges());
            let k = (0.4 * sm.num_edges() as f64).floor() as usize;
            let fakes: Vec<_> =
                out.edges().iter().filter(|e| !original.contains(e)).collect();
            assert_eq!(fakes.len(), k);
            for &(a, b) in &fakes {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn noise_injection_rejects_bad_ratio_and_dense_graph() {
        let sm = SocialMatrix::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert!(inject_social_noise(&sm, 1.0, 7).is_err());
        // complete graph: nowhere to put fakes
        assert!(inject_social_noise(&sm, 0.5, 7).is_err());
    }

    #[test]
    fn histogram_identical_embeddings_mass_at_top_bin() {
        let sm = SocialMatrix::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let emb = arr2(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let h = similarity_histogram(&emb, &sm);
        assert_eq!(h.counts[19], 2);
        assert_eq!(h.total, 2);
        assert_eq!(h.fraction_below(0.2), 0.0);
    }

    #[test]
    fn histogram_orthogonal_pairs_in_zero_bin() {
        let sm = SocialMatrix::from_edges(2, [(0, 1)]).unwrap();
        let emb = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let h = similarity_histogram(&emb, &sm);
        // cos = 0 lands in the [0.0, 0.1) bin
        assert_eq!(h.counts[10], 1);
    }
}
