//! Part meshes and the labeled parts-overview composite.
//!
//! Meshes come from Wavefront OBJ files (`v` and `f` records only). Each part
//! is projected orthographically along a fixed isometric direction and drawn
//! as a wireframe into its own grid cell, with its label printed underneath
//! in a built-in 5x7 bitmap font. Output is a binary PPM.

use crate::corpus::FurnitureItem;
use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("obj line {line}: {message}")]
    Obj { line: usize, message: String },
    #[error("{meshes} meshes but {labels} labels")]
    LengthMismatch { meshes: usize, labels: usize },
    #[error("nothing to render")]
    Empty,
    #[error("cell size must be positive")]
    ZeroCell,
    #[error("malformed ppm: {0}")]
    Ppm(String),
    #[error("png encoding failed: {0}")]
    Png(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = RenderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn scaled(&self, s: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| [v[0] * s, v[1] * s, v[2] * s]).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Writes `v`/`f` records with 1-based indices.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
        for f in &self.faces {
            out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        out
    }
}

fn resolve_index(token: &str, vertex_count: usize, line: usize) -> Result<usize> {
    let err = |message: String| RenderError::Obj { line, message };
    let head = token.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| err(format!("bad face index {token:?}")))?;
    let idx = match raw {
        0 => return Err(err("face index 0 is not valid".into())),
        r if r > 0 => (r - 1) as usize,
        r => {
            let back = r.unsigned_abs() as usize;
            if back > vertex_count {
                return Err(err(format!("relative index {r} before first vertex")));
            }
            vertex_count - back
        }
    };
    if idx >= vertex_count {
        return Err(err(format!("face index {raw} out of range ({vertex_count} vertices)")));
    }
    Ok(idx)
}

pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut mesh = Mesh::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| RenderError::Obj { line: lineno, message: "malformed vertex".into() })?;
                let [x, y, z] = coords[..] else {
                    return Err(RenderError::Obj {
                        line: lineno,
                        message: "vertex needs three coordinates".into(),
                    });
                };
                mesh.vertices.push([x, y, z]);
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|t| resolve_index(t, mesh.vertices.len(), lineno))
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(RenderError::Obj {
                        line: lineno,
                        message: "face needs at least three vertices".into(),
                    });
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// Reads `parts/part_<i>.obj` for every part of an item directory.
pub fn load_part_meshes(dir: &Path, part_count: u32) -> Result<Vec<Mesh>> {
    (0..part_count)
        .map(|i| {
            let path = dir.join(format!("part_{i}.obj"));
            let text = fs::read_to_string(&path).map_err(|source| RenderError::Io { path, source })?;
            parse_obj(&text)
        })
        .collect()
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Screen basis `(right, up)` for the view direction (1,1,1)/sqrt(3) with
/// up-hint +z.
fn view_basis() -> (Vec3, Vec3) {
    let d = normalize([1.0, 1.0, 1.0]);
    let hint = [0.0, 0.0, 1.0];
    let k = dot(hint, d);
    let up = normalize([hint[0] - k * d[0], hint[1] - k * d[1], hint[2] - k * d[2]]);
    (cross(up, d), up)
}

/// Orthographic image-plane coordinates of a point.
pub fn project(v: Vec3) -> [f64; 2] {
    let (right, up) = view_basis();
    [dot(v, right), dot(v, up)]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    /// Row-major.
    pub pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, fill: [u8; 3]) -> Self {
        Self { width, height, pixels: vec![fill; (width as usize) * (height as usize)] }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            let i = (y as usize) * (self.width as usize) + x as usize;
            self.pixels[i] = color;
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, color: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, color);
            }
        }
    }

    pub fn draw_line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Draws `text` with the top-left corner of the first glyph at (x, y).
    pub fn draw_text(&mut self, x: i64, y: i64, text: &str, scale: i64, color: [u8; 3]) {
        for (i, ch) in text.chars().enumerate() {
            let gx = x + i as i64 * GLYPH_ADVANCE * scale;
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.fill_rect(gx + col * scale, y + row as i64 * scale, scale, scale, color);
                    }
                }
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| RenderError::Ppm(m.to_string());
        // Header: magic, width, height, maxval separated by whitespace, then one
        // whitespace byte before the raster.
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("expected P6 magic"));
        }
        let width: u32 = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: u32 = fields[2].parse().map_err(|_| bad("bad height"))?;
        if fields[3] != "255" {
            return Err(bad("only maxval 255 is supported"));
        }
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        let n = (width as usize) * (height as usize);
        if data.len() != n * 3 {
            return Err(bad("raster length does not match dimensions"));
        }
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|source| RenderError::Io { path: path.to_path_buf(), source })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let img = image::RgbImage::from_raw(self.width, self.height, raw)
            .ok_or_else(|| RenderError::Png("pixel buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| RenderError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }
}

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const WIRE: [u8; 3] = [30, 60, 160];
pub const GRID_LINE: [u8; 3] = [220, 220, 220];
pub const INK: [u8; 3] = [0, 0, 0];

const GLYPH_ADVANCE: i64 = 6;

/// 5x7 glyph rows, bit 4 is the leftmost column. Uppercase letters share the
/// lowercase shapes; anything unknown draws as a hollow box.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_lowercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

pub fn text_width(text: &str, scale: i64) -> i64 {
    let n = text.chars().count() as i64;
    if n == 0 {
        0
    } else {
        (n * GLYPH_ADVANCE - 1) * scale
    }
}

/// Edges to draw: boundary edges, creases, and anything not shared by exactly
/// two coplanar triangles. Diagonals introduced by fan triangulation of a
/// planar polygon are dropped.
fn feature_edges(mesh: &Mesh) -> Vec<(usize, usize)> {
    let mut normals: BTreeMap<(usize, usize), Vec<Vec3>> = BTreeMap::new();
    for f in &mesh.faces {
        let [p, q, r] = f.map(|i| mesh.vertices[i]);
        let n = cross(
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]],
            [r[0] - p[0], r[1] - p[1], r[2] - p[2]],
        );
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            normals.entry((a.min(b), a.max(b))).or_default().push(n);
        }
    }
    normals
        .into_iter()
        .filter(|(_, ns)| {
            if ns.len() != 2 {
                return true;
            }
            let (n1, n2) = (ns[0], ns[1]);
            let c = cross(n1, n2);
            let scale = dot(n1, n1).sqrt() * dot(n2, n2).sqrt();
            scale == 0.0 || dot(c, c).sqrt() > 1e-9 * scale
        })
        .map(|(e, _)| e)
        .collect()
}

/// Fraction of each cell the projected mesh may span.
pub const FILL_FRACTION: f64 = 0.9;

fn label_scale(cell_px: u32) -> i64 {
    (i64::from(cell_px) / 64).max(1)
}

fn label_strip_height(cell_px: u32) -> i64 {
    let s = label_scale(cell_px);
    7 * s + 4 * s
}

pub fn grid_shape(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let cols = cols.max(1);
    (cols, n.div_ceil(cols))
}

fn draw_mesh(img: &mut RasterImage, mesh: &Mesh, x0: i64, y0: i64, cell: i64) {
    if mesh.vertices.is_empty() {
        return;
    }
    let projected: Vec<[f64; 2]> = mesh.vertices.iter().map(|&v| project(v)).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &projected {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if extent > 0.0 { FILL_FRACTION * cell as f64 / extent } else { 1.0 };
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = cell as f64 / 2.0;
    let to_px = |p: [f64; 2]| {
        (
            x0 + (half + (p[0] - center[0]) * scale).floor() as i64,
            y0 + (half - (p[1] - center[1]) * scale).floor() as i64,
        )
    };
    if mesh.faces.is_empty() {
        for &p in &projected {
            let (x, y) = to_px(p);
            img.put(x, y, WIRE);
        }
        return;
    }
    for (a, b) in feature_edges(mesh) {
        img.draw_line(to_px(projected[a]), to_px(projected[b]), WIRE);
    }
}

/// Composes all part meshes into one labeled grid image.
pub fn render_parts_overview(meshes: &[Mesh], labels: &[String], cell_px: u32) -> Result<RasterImage> {
    if meshes.len() != labels.len() {
        return Err(RenderError::LengthMismatch { meshes: meshes.len(), labels: labels.len() });
    }
    if meshes.is_empty() {
        return Err(RenderError::Empty);
    }
    if cell_px == 0 {
        return Err(RenderError::ZeroCell);
    }
    let (cols, rows) = grid_shape(meshes.len());
    let cell = i64::from(cell_px);
    let strip = label_strip_height(cell_px);
    let row_h = cell + strip;
    let mut img = RasterImage::new(cell_px * cols as u32, (row_h * rows as i64) as u32, BACKGROUND);

    for (i, (mesh, label)) in meshes.iter().zip(labels).enumerate() {
        let x0 = (i % cols) as i64 * cell;
        let y0 = (i / cols) as i64 * row_h;
        // cell frame
        img.draw_line((x0, y0), (x0 + cell - 1, y0), GRID_LINE);
        img.draw_line((x0, y0), (x0, y0 + row_h - 1), GRID_LINE);
        draw_mesh(&mut img, mesh, x0, y0, cell);
        let scale = label_scale(cell_px);
        let tx = x0 + (cell - text_width(label, scale)) / 2;
        img.draw_text(tx, y0 + cell + 2 * scale, label, scale, INK);
    }
    Ok(img)
}

pub fn part_labels(n: u32) -> Vec<String> {
    (0..n).map(|i| format!("part_{i}")).collect()
}

/// Mesh directory inside an item directory.
pub const PARTS_DIR: &str = "parts";
pub const DEFAULT_CELL_PX: u32 = 128;

/// Renders the overview for an item from its `parts/part_<i>.obj` meshes.
pub fn render_item_overview(item: &FurnitureItem, cell_px: u32) -> Result<RasterImage> {
    let meshes = load_part_meshes(&item.dir.join(PARTS_DIR), item.part_count)?;
    render_parts_overview(&meshes, &part_labels(item.part_count), cell_px)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const UNIT_CUBE: &str = "\
# unit cube
o cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
vn 0 0 1
f 1 4 3 2
f 5 6 7 8
f 1 2 6 5
f 2 3 7 6
f 3 4 8 7
f 4 1 5 8
";

    #[test]
    fn unit_cube_counts() {
        let mesh = parse_obj(UNIT_CUBE).unwrap();
        assert_eq!(mesh.vertices.len(), 8);
        assert_eq!(mesh.faces.len(), 12);
        // quads drop their diagonals: 12 cube edges remain
        assert_eq!(feature_edges(&mesh).len(), 12);
    }

    #[test]
    fn empty_obj() {
        assert_eq!(parse_obj("").unwrap(), Mesh::default());
    }

    #[test]
    fn face_out_of_range_reports_line() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n").unwrap_err();
        assert!(matches!(err, RenderError::Obj { line: 4, .. }), "{err}");
    }

    #[test]
    fn malformed_vertex() {
        assert!(matches!(parse_obj("v 0 zero 0").unwrap_err(), RenderError::Obj { line: 1, .. }));
        assert!(matches!(parse_obj("v 0 0").unwrap_err(), RenderError::Obj { line: 1, .. }));
    }

    #[test]
    fn negative_and_slashed_indices() {
        let mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf -4/1/1 -3//2 -1\n").unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 3]]);
        assert!(parse_obj("v 0 0 0\nf -2 1 1").is_err());
        assert!(parse_obj("v 0 0 0\nv 0 0 0\nv 0 0 0\nf 0 1 2").is_err());
    }

    #[test]
    fn pentagon_fans_into_three_triangles() {
        let mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 2 1 0\nv 1 2 0\nv 0 1 0\nf 1 2 3 4 5\n").unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3], [0, 3, 4]]);
    }

    #[test]
    fn view_axis_projects_to_origin() {
        let p = project([1.0, 1.0, 1.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        // +z projects straight up
        let z = project([0.0, 0.0, 1.0]);
        assert!(z[0].abs() < 1e-12 && z[1] > 0.0);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_shape(1), (1, 1));
        assert_eq!(grid_shape(5), (3, 2));
        assert_eq!(grid_shape(9), (3, 3));
        assert_eq!(grid_shape(10), (4, 3));
    }

    fn wire_bbox(img: &RasterImage, cell: u32) -> (u32, u32, u32, u32) {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..cell {
            for x in 0..cell {
                if img.get(x, y) == WIRE {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0, y0, x1, y1)
    }

    #[test]
    fn cube_silhouette_fits_cell() {
        let mesh = parse_obj(UNIT_CUBE).unwrap();
        let img = render_parts_overview(&[mesh], &["part_0".into()], 64).unwrap();
        assert_eq!(img.width, 64);
        let (x0, y0, x1, y1) = wire_bbox(&img, 64);
        // Analytic hexagon: corners project to |x| <= 1/sqrt(2), |y| <= 2/sqrt(6);
        // the taller axis (y, 1.633) is scaled to 0.9 * 64 = 57.6 px.
        let h = f64::from(y1 - y0);
        let w = f64::from(x1 - x0);
        assert!((56.0..=57.6).contains(&h), "height {h}");
        let expected_w = 57.6 * (2.0 / 2f64.sqrt()) / (4.0 / 6f64.sqrt());
        assert!((w - expected_w).abs() <= 2.0, "width {w} vs {expected_w}");
    }

    #[test]
    fn centered_vertex_on_view_axis_hits_cell_center() {
        // cube [-1,1]^3 contains (1,1,1), which lies on the view axis
        let mut mesh = parse_obj(UNIT_CUBE).unwrap();
        for v in &mut mesh.vertices {
            *v = v.map(|c| 2.0 * c - 1.0);
        }
        let img = render_parts_overview(&[mesh], &["x".into()], 64).unwrap();
        // (1,1,1) and (-1,-1,-1) both map to the centre; three edges meet there
        assert_eq!(img.get(32, 32), WIRE);
    }

    #[test]
    fn scaling_does_not_change_pixels() {
        let mesh = parse_obj(UNIT_CUBE).unwrap();
        let labels = vec!["part_0".to_string()];
        let a = render_parts_overview(&[mesh.scaled(1.0)], &labels, 64).unwrap();
        let b = render_parts_overview(&[mesh.scaled(4.0)], &labels, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overview_grid_and_errors() {
        let mesh = parse_obj(UNIT_CUBE).unwrap();
        let meshes = vec![mesh; 5];
        let labels = part_labels(5);
        let img = render_parts_overview(&meshes, &labels, 64).unwrap();
        assert_eq!(img.width, 3 * 64);
        assert_eq!(i64::from(img.height), 2 * (64 + label_strip_height(64)));
        assert!(matches!(
            render_parts_overview(&meshes, &labels[..4], 64),
            Err(RenderError::LengthMismatch { .. })
        ));
        assert!(matches!(render_parts_overview(&[], &[], 64), Err(RenderError::Empty)));
    }

    #[test]
    fn labels_are_drawn() {
        let mesh = parse_obj(UNIT_CUBE).unwrap();
        let img = render_parts_overview(&[mesh], &["7".into()], 64).unwrap();
        let ink = img.pixels.iter().filter(|p| **p == INK).count();
        // glyph '7' has 11 lit cells
        assert_eq!(ink, 11);
    }

    #[test]
    fn ppm_round_trip() {
        let mesh = parse_obj(UNIT_CUBE).unwrap();
        let img = render_parts_overview(&[mesh], &["part_0".into()], 32).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n32 "));
        assert_eq!(RasterImage::from_ppm(&bytes).unwrap(), img);
        assert!(RasterImage::from_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn png_encodes() {
        let img = RasterImage::new(4, 3, [1, 2, 3]);
        let png = img.to_png().unwrap();
        assert!(png.starts_with(&[0x89, b'P', b'N', b'G']));
    }
}
