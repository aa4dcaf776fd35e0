//! Regenerates the synthetic test corpus under `crates/core/tests/fixtures`.
//!
//!     cargo run -p assembly-core --example make_fixture -- crates/core/tests/fixtures
//!
//! Every byte is a function of the tables below, so rerunning reproduces the
//! checked-in files exactly.

use assembly_core::corpus::{Category, Endpoint, ItemManifest, MANIFEST_FILE};
use assembly_core::partviz::{render_parts_overview, part_labels, Mesh, RasterImage, DEFAULT_CELL_PX, PARTS_DIR};
use assembly_core::retrieval::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

const EMBED_DIM: usize = 512;

type Raw = (Endpoint, Endpoint);

fn p(a: u32, b: u32) -> Raw {
    (Endpoint::Part(a), Endpoint::Part(b))
}

fn pairs(list: &[(u32, u32)]) -> Vec<Raw> {
    list.iter().map(|&(a, b)| p(a, b)).collect()
}

struct Spec {
    category: Category,
    name: &'static str,
    part_count: u32,
    connections: Vec<Raw>,
    steps: Option<Vec<Vec<Raw>>>,
}

fn kallax() -> Vec<Raw> {
    // 0 top, 1 bottom, 2 left, 3 right, 4-6 dividers, 7-18 shelves, 19 back, 20 plinth
    let mut c = pairs(&[(0, 2), (0, 3), (1, 2), (1, 3)]);
    for d in 4..=6 {
        c.extend(pairs(&[(0, d), (1, d)]));
    }
    let left = [2, 4, 5, 6];
    let right = [4, 5, 6, 3];
    for shelf in 7..=18u32 {
        let col = ((shelf - 7) % 4) as usize;
        c.extend(pairs(&[(left[col], shelf), (right[col], shelf)]));
    }
    c.push((Endpoint::Part(19), Endpoint::Group("0,1,2,3".into())));
    c.push(p(1, 20));
    c
}

fn billy() -> Vec<Raw> {
    // 0 top, 1 bottom, 2 left, 3 right, 4-8 shelves, 9 back, 10 plinth
    let mut c = pairs(&[(0, 2), (0, 3), (1, 2), (1, 3)]);
    for shelf in 4..=8 {
        c.push((Endpoint::Part(shelf), Endpoint::Group("2,3".into())));
    }
    c.push((Endpoint::Group("0,1,2,3".into()), Endpoint::Part(9)));
    c.push((Endpoint::Part(10), Endpoint::Group("1,2,3".into())));
    c
}

fn specs() -> Vec<Spec> {
    use Category::*;
    let spec = |category, name, part_count, connections| Spec { category, name, part_count, connections, steps: None };
    vec![
        spec(Bench, "applaro", 4, pairs(&[(0, 1), (0, 2), (0, 3), (1, 3)])),
        spec(Bench, "hemnes", 6, pairs(&[(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (2, 5)])),
        spec(
            Chair,
            "applaro",
            5,
            vec![(Endpoint::Group("1,2".into()), Endpoint::Part(0)), p(0, 3), p(3, 4)],
        ),
        spec(
            Chair,
            "applaro_3",
            9,
            pairs(&[(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (2, 5), (3, 6), (4, 6), (5, 7), (6, 8), (7, 8)]),
        ),
        spec(Chair, "ingolf", 6, vec![(Endpoint::Group("0".into()), Endpoint::Group("1,2,3,4".into())), p(1, 5), p(2, 5)]),
        spec(Desk, "linnmon", 5, pairs(&[(0, 1), (0, 2), (0, 3), (0, 4)])),
        spec(
            Desk,
            "micke",
            12,
            pairs(&[
                (0, 1),
                (0, 2),
                (1, 3),
                (2, 3),
                (0, 4),
                (4, 5),
                (5, 6),
                (4, 7),
                (7, 8),
                (8, 9),
                (9, 10),
                (10, 11),
                (6, 11),
            ]),
        ),
        spec(Misc, "bekvam", 7, pairs(&[(0, 1), (0, 2), (0, 3), (1, 4), (2, 4), (3, 5), (4, 6), (5, 6)])),
        spec(Misc, "frosta", 3, pairs(&[(0, 1), (0, 2), (1, 2)])),
        spec(Shelf, "billy", 11, billy()),
        spec(Shelf, "kallax", 21, kallax()),
        Spec {
            category: Table,
            name: "lack",
            part_count: 5,
            connections: pairs(&[(0, 1), (0, 2), (0, 3), (0, 4)]),
            steps: Some(vec![pairs(&[(0, 1), (0, 2)]), pairs(&[(0, 3), (0, 4)])]),
        },
        spec(Table, "lisabo", 7, pairs(&[(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (2, 5), (3, 6), (4, 6)])),
    ]
}

fn box_mesh(size: [f64; 3]) -> Mesh {
    let [x, y, z] = size;
    let vertices = vec![
        [0.0, 0.0, 0.0],
        [x, 0.0, 0.0],
        [x, y, 0.0],
        [0.0, y, 0.0],
        [0.0, 0.0, z],
        [x, 0.0, z],
        [x, y, z],
        [0.0, y, z],
    ];
    let quads = [[0, 3, 2, 1], [4, 5, 6, 7], [0, 1, 5, 4], [1, 2, 6, 5], [2, 3, 7, 6], [3, 0, 4, 7]];
    let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    Mesh { vertices, faces }
}

fn prism_mesh(sides: usize, radius: f64, height: f64) -> Mesh {
    let mut vertices = Vec::new();
    for z in [0.0, height] {
        for i in 0..sides {
            let t = std::f64::consts::TAU * i as f64 / sides as f64;
            vertices.push([radius * t.cos(), radius * t.sin(), z]);
        }
    }
    let mut faces = Vec::new();
    for i in 0..sides {
        let j = (i + 1) % sides;
        faces.push([i, j, sides + j]);
        faces.push([i, sides + j, sides + i]);
    }
    for i in 1..sides - 1 {
        faces.push([0, i + 1, i]);
        faces.push([sides, sides + i, sides + i + 1]);
    }
    Mesh { vertices, faces }
}

/// Part shapes cycle through panels, rails, legs and dowel-like prisms.
fn part_mesh(rng: &mut ChaCha8Rng, index: u32) -> Mesh {
    let jitter = |rng: &mut ChaCha8Rng, v: f64| v * rng.random_range(0.8..1.2);
    let m = match index % 4 {
        0 => box_mesh([jitter(rng, 0.8), jitter(rng, 0.5), jitter(rng, 0.03)]),
        1 => box_mesh([jitter(rng, 0.05), jitter(rng, 0.05), jitter(rng, 0.7)]),
        2 => box_mesh([jitter(rng, 0.6), jitter(rng, 0.06), jitter(rng, 0.1)]),
        _ => prism_mesh(8, jitter(rng, 0.03), jitter(rng, 0.5)),
    };
    // round coordinates so the OBJ text is short and platform independent
    Mesh { vertices: m.vertices.iter().map(|v| v.map(|c| (c * 1e4).round() / 1e4)).collect(), faces: m.faces }
}

fn manual_page(title: &str, page: usize, pages: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let mut img = RasterImage::new(160, 120, [250, 250, 245]);
    img.draw_line((0, 0), (159, 0), [0, 0, 0]);
    img.draw_line((0, 119), (159, 119), [0, 0, 0]);
    img.draw_line((0, 0), (0, 119), [0, 0, 0]);
    img.draw_line((159, 0), (159, 119), [0, 0, 0]);
    img.draw_text(6, 6, title, 1, [0, 0, 0]);
    img.draw_text(6, 108, &format!("{}/{}", page + 1, pages), 1, [0, 0, 0]);
    // a few boxes joined by arrows stand in for the exploded diagram
    let mut centers = Vec::new();
    for _ in 0..3 {
        let (x, y) = (rng.random_range(15..125), rng.random_range(25..85));
        img.fill_rect(x, y, 20, 12, [90, 90, 90]);
        centers.push((x + 10, y + 6));
    }
    img.draw_line(centers[0], centers[1], [200, 30, 30]);
    img.draw_line(centers[1], centers[2], [200, 30, 30]);
    img
}

fn seeded(tag: &str) -> ChaCha8Rng {
    let seed = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) {
    fs::create_dir_all(path.parent().expect("parent")).expect("mkdir");
    fs::write(path, bytes).expect("write");
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/tests/fixtures".into()));
    let corpus_dir = out.join("corpus");
    if corpus_dir.exists() {
        fs::remove_dir_all(&corpus_dir).expect("clear old corpus");
    }

    let specs = specs();
    let mut centroids = std::collections::BTreeMap::new();
    for c in Category::ALL {
        let mut rng = seeded(&format!("centroid/{c}"));
        centroids.insert(c, (0..EMBED_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>());
    }

    let mut cover_ids = Vec::new();
    let mut cover_rows = Vec::new();
    for s in &specs {
        let id = format!("{}_{}", s.category, s.name);
        let dir = corpus_dir.join(&id);
        let mut rng = seeded(&id);

        let meshes: Vec<Mesh> = (0..s.part_count).map(|i| part_mesh(&mut rng, i)).collect();
        for (i, m) in meshes.iter().enumerate() {
            write(&dir.join(PARTS_DIR).join(format!("part_{i}.obj")), m.to_obj());
        }
        let overview = render_parts_overview(&meshes, &part_labels(s.part_count), DEFAULT_CELL_PX).expect("render");
        write(&dir.join("parts_overview.png"), overview.to_png().expect("png"));

        let page_count = 2 + s.part_count as usize / 3;
        let title = format!("{} {}", s.category, s.name).to_lowercase();
        let pages: Vec<PathBuf> = (0..page_count).map(|i| PathBuf::from(format!("pages/page_{i:02}.png"))).collect();
        for (i, rel) in pages.iter().enumerate() {
            write(&dir.join(rel), manual_page(&title, i, page_count, &mut rng).to_png().expect("png"));
        }

        let manifest = ItemManifest {
            id: id.clone(),
            category: s.category,
            name: s.name.to_string(),
            part_count: s.part_count,
            pages,
            parts_overview: PathBuf::from("parts_overview.png"),
            connections: s.connections.clone(),
            cover_page: None,
            assembly_steps: s.steps.clone(),
        };
        write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("json") + "\n");

        let centroid = &centroids[&s.category];
        cover_rows.extend(centroid.iter().map(|c| c + rng.random_range(-0.15f32..0.15)));
        cover_ids.push(id);
    }
    EmbeddingMatrix::new(cover_ids, EMBED_DIM, cover_rows).expect("covers").write(&out.join("covers.bin")).expect("write covers");

    let mut query_rows = Vec::new();
    for c in Category::ALL {
        let mut rng = seeded(&format!("query/{c}"));
        query_rows.extend(centroids[&c].iter().map(|v| v + rng.random_range(-0.05f32..0.05)));
    }
    let query_ids = Category::ALL.iter().map(|c| c.to_string()).collect();
    EmbeddingMatrix::new(query_ids, EMBED_DIM, query_rows).expect("queries").write(&out.join("queries.bin")).expect("write queries");

    println!("wrote {} items to {}", specs.len(), corpus_dir.display());
}
