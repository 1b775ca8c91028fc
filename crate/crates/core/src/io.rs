//! Mesh, blob, label and image files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{Label, TriMesh, Vec3};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Reads positions, optional `v x y z r g b` colors and polygon faces (fan-triangulated).
pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::parse(path.display().to_string(), msg),
        other => other,
    })
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse("obj", format!("line {}: {e}", ln + 1)))?;
                if nums.len() < 3 {
                    return Err(Error::parse(
                        "obj",
                        format!("line {}: vertex needs 3 coordinates", ln + 1),
                    ));
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                if nums.len() >= 6 {
                    colors.push(Vec3::new(nums[3], nums[4], nums[5]));
                }
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head
                            .parse()
                            .map_err(|e| Error::parse("obj", format!("line {}: {e}", ln + 1)))?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        if resolved < 0 {
                            return Err(Error::parse("obj", format!("line {}: bad index {i}", ln + 1)));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::parse("obj", format!("line {}: face needs 3 indices", ln + 1)));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut mesh = TriMesh::new(vertices, faces)?;
    if !colors.is_empty() {
        if colors.len() != mesh.vertices.len() {
            return Err(Error::parse("obj", "colors given for only some vertices"));
        }
        mesh.colors = Some(colors);
    }
    Ok(mesh)
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut w = create(path)?;
    write_obj_to(&mut w, mesh).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_obj_to(w: &mut impl Write, mesh: &TriMesh) -> std::io::Result<()> {
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => writeln!(
                w,
                "v {:.9} {:.9} {:.9} {:.6} {:.6} {:.6}",
                v.x, v.y, v.z, c[i].x, c[i].y, c[i].z
            )?,
            None => writeln!(w, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z)?,
        }
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Binary little-endian PLY: float xyz, optional uchar rgb, faces with optional uchar label.
pub fn write_ply(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut w = create(path)?;
    let inner = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format binary_little_endian 1.0")?;
        writeln!(w, "element vertex {}", mesh.vertices.len())?;
        for p in ["x", "y", "z"] {
            writeln!(w, "property float {p}")?;
        }
        if mesh.colors.is_some() {
            for p in ["red", "green", "blue"] {
                writeln!(w, "property uchar {p}")?;
            }
        }
        writeln!(w, "element face {}", mesh.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        if mesh.labels.is_some() {
            writeln!(w, "property uchar label")?;
        }
        writeln!(w, "end_header")?;
        for (i, v) in mesh.vertices.iter().enumerate() {
            for x in v.iter() {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
            if let Some(c) = &mesh.colors {
                for x in c[i].iter() {
                    w.write_all(&[(x.clamp(0.0, 1.0) * 255.0).round() as u8])?;
                }
            }
        }
        for (fi, f) in mesh.faces.iter().enumerate() {
            w.write_all(&[3u8])?;
            for i in f {
                w.write_all(&(*i as i32).to_le_bytes())?;
            }
            if let Some(l) = &mesh.labels {
                w.write_all(&[match l[fi] {
                    Label::Human => 0u8,
                    Label::Object => 1u8,
                }])?;
            }
        }
        w.flush()
    };
    inner(&mut w).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        macro_rules! rd {
            ($t:ty) => {{
                let mut b = [0u8; std::mem::size_of::<$t>()];
                r.read_exact(&mut b)?;
                <$t>::from_le_bytes(b) as f64
            }};
        }
        Ok(match self {
            Scalar::I8 => rd!(i8),
            Scalar::U8 => rd!(u8),
            Scalar::I16 => rd!(i16),
            Scalar::U16 => rd!(u16),
            Scalar::I32 => rd!(i32),
            Scalar::U32 => rd!(u32),
            Scalar::F32 => rd!(f32),
            Scalar::F64 => rd!(f64),
        })
    }
}

enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

/// Reads binary little-endian PLY as written by [`write_ply`] (and compatible files).
pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let mut r = open(path)?;
    let perr = |m: String| Error::parse(path.display().to_string(), m);
    let mut elements: Vec<(String, usize, Vec<Property>)> = Vec::new();
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(perr("missing end_header".into()));
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if first {
            if t != ["ply"] {
                return Err(perr("not a PLY file".into()));
            }
            first = false;
            continue;
        }
        match t.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(perr(format!("unsupported PLY format {fmt}")));
                }
            }
            ["element", name, count] => {
                let n = count.parse().map_err(|_| perr(format!("bad element count {count}")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", c, i, _] => {
                let (c, i) = (
                    Scalar::parse(c).ok_or_else(|| perr(format!("bad type {c}")))?,
                    Scalar::parse(i).ok_or_else(|| perr(format!("bad type {i}")))?,
                );
                elements
                    .last_mut()
                    .ok_or_else(|| perr("property before element".into()))?
                    .2
                    .push(Property::List(c, i));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| perr(format!("bad type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| perr("property before element".into()))?
                    .2
                    .push(Property::Scalar(name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => {}
        }
    }

    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    let mut labels = Vec::new();
    let ioerr = |e: std::io::Error| Error::parse(path.display().to_string(), format!("truncated body: {e}"));
    for (name, count, props) in &elements {
        for _ in 0..*count {
            let mut pos = [0.0; 3];
            let mut col = [None; 3];
            let mut face: Vec<u32> = Vec::new();
            let mut label = None;
            for p in props {
                match p {
                    Property::Scalar(pn, ty) => {
                        let v = ty.read(&mut r).map_err(ioerr)?;
                        match pn.as_str() {
                            "x" => pos[0] = v,
                            "y" => pos[1] = v,
                            "z" => pos[2] = v,
                            "red" => col[0] = Some(v / 255.0),
                            "green" => col[1] = Some(v / 255.0),
                            "blue" => col[2] = Some(v / 255.0),
                            "label" => label = Some(v),
                            _ => {}
                        }
                    }
                    Property::List(cty, ity) => {
                        let n = cty.read(&mut r).map_err(ioerr)? as usize;
                        for _ in 0..n {
                            face.push(ity.read(&mut r).map_err(ioerr)? as u32);
                        }
                    }
                }
            }
            match name.as_str() {
                "vertex" => {
                    vertices.push(Vec3::from(pos));
                    if let [Some(r), Some(g), Some(b)] = col {
                        colors.push(Vec3::new(r, g, b));
                    }
                }
                "face" => {
                    if face.len() < 3 {
                        return Err(perr("face with fewer than 3 indices".into()));
                    }
                    for k in 1..face.len() - 1 {
                        faces.push([face[0], face[k], face[k + 1]]);
                        if let Some(l) = label {
                            labels.push(if l == 0.0 { Label::Human } else { Label::Object });
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let mut mesh = TriMesh::new(vertices, faces)?;
    if !colors.is_empty() {
        mesh = mesh.with_colors(colors)?;
    }
    if !labels.is_empty() {
        mesh = mesh.with_labels(labels)?;
    }
    Ok(mesh)
}

/// Dispatches on extension: `.ply` or OBJ otherwise.
pub fn read_mesh(path: &Path) -> Result<TriMesh> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => read_ply(path),
        _ => read_obj(path),
    }
}

pub fn write_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => write_ply(path, mesh),
        _ => write_obj(path, mesh),
    }
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(
            path.display().to_string(),
            "length is not a multiple of 4",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    let mut w = create(path)?;
    for l in labels {
        writeln!(w, "{}", l.as_str()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            Label::parse(l).ok_or_else(|| {
                Error::parse(
                    path.display().to_string(),
                    format!("line {}: unknown label {l:?}", i + 1),
                )
            })
        })
        .collect()
}

/// 8-bit grayscale or RGB PNG; `channels` is 1 or 3, values in [0, 1].
pub fn write_png(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::InvalidArgument(format!("cannot write {channels}-channel PNG"))),
    };
    if data.len() != width * height * channels {
        return Err(Error::DimensionMismatch(format!(
            "{} samples for a {width}x{height}x{channels} image",
            data.len()
        )));
    }
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let bytes: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer.finish().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// A decoded PNG reduced to one channel in [0, 1] (first channel of color images).
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

pub fn read_png_gray(path: &Path) -> Result<GrayImage> {
    let file = open(path)?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(path.display().to_string(), "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..w * h).map(|i| buf[i * channels] as f64 / 255.0).collect();
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn colored_quad() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.5),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
        .with_colors(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.2, 0.4, 0.6),
        ])
        .unwrap()
        .with_labels(vec![Label::Human, Label::Object])
        .unwrap()
    }

    #[test]
    fn obj_round_trip_with_colors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let m = colored_quad();
        write_obj(&p, &m).unwrap();
        let back = read_obj(&p).unwrap();
        assert_eq!(back.faces, m.faces);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!((a - b).norm() < 1e-8);
        }
        for (a, b) in back.colors.unwrap().iter().zip(m.colors.as_ref().unwrap()) {
            assert!((a - b).norm() < 1e-5);
        }
    }

    #[test]
    fn obj_polygons_are_fanned_and_negative_indices_resolve() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(parse_obj("v 0 0\n").is_err());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn ply_round_trip_keeps_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        let m = colored_quad();
        write_ply(&p, &m).unwrap();
        let back = read_ply(&p).unwrap();
        assert_eq!(back.faces, m.faces);
        assert_eq!(back.labels, m.labels);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
        for (a, b) in back.colors.unwrap().iter().zip(m.colors.as_ref().unwrap()) {
            assert!((a - b).norm() < 1.0 / 255.0);
        }
    }

    #[test]
    fn labels_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        let labels = vec![Label::Object, Label::Human, Label::Object];
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);

        let img = dir.path().join("m.png");
        let data = vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        write_png(&img, 3, 2, 1, &data).unwrap();
        let back = read_png_gray(&img).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.data, data);
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_obj(Path::new("/nonexistent/x.obj")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
