//! Deterministic software rasterizer producing FPV RGB frames of the track.
//!
//! Flat shading, no anti-aliasing: gate frames as per-gate hued quads, a
//! checkerboard floor anchored to the track, and a solid sky. Texture for
//! downstream corner tracking comes from the checkerboard and gate edges.

use crate::sim::{QuadState, Track};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

#[derive(thiserror::Error, Debug)]
pub enum RenderError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad frame pack: {0}")]
    BadPack(String),
}

/// Pinhole FPV camera rigidly attached to the body with an uptilt about the
/// body y axis. Image x is right, image y is down.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
    /// Camera uptilt above the body x axis, degrees.
    pub uptilt_deg: f64,
    /// Principal point; defaults to the image center.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            hfov_deg: 80.0,
            uptilt_deg: 25.0,
            cx: None,
            cy: None,
        }
    }
}

impl CameraModel {
    pub fn with_resolution(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (
            self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0),
            self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0),
        )
    }

    /// Focal length in pixels; square pixels, so the vertical FOV follows
    /// from the aspect ratio.
    pub fn focal_px(&self) -> f64 {
        let half = (self.hfov_deg.to_radians() / 2.0).tan();
        (self.width as f64 - 1.0) / 2.0 / half
    }

    /// Rotation taking body-frame vectors to camera-frame vectors.
    ///
    /// Body: x forward, y left, z up. Camera: x right, y down, z forward,
    /// with the optical axis pitched up from body x by the uptilt angle.
    pub fn body_to_camera(&self) -> Matrix3<f64> {
        let th = self.uptilt_deg.to_radians();
        let fwd = Vector3::new(th.cos(), 0.0, th.sin());
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = fwd.cross(&right);
        // Rows of the body->camera matrix are the camera axes in body coords.
        Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()])
    }
}

/// Projection of one world point.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    /// False when the point lies behind the camera plane.
    pub in_front: bool,
}

/// Project a world point through the drone's camera.
pub fn project_point(p_world: &Vector3<f64>, s: &QuadState, cam: &CameraModel) -> Projection {
    let r_bw = s.q.to_rotation_matrix();
    let p_body = r_bw.transpose() * (p_world - s.p);
    let p_cam = cam.body_to_camera() * p_body;
    let (cx, cy) = cam.principal_point();
    let f = cam.focal_px();
    if p_cam.z <= 1e-9 {
        return Projection {
            x: 0.0,
            y: 0.0,
            in_front: false,
        };
    }
    Projection {
        x: cx + f * p_cam.x / p_cam.z,
        y: cy + f * p_cam.y / p_cam.z,
        in_front: true,
    }
}

/// 8-bit RGB frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub id: u64,
    pub t: f64,
}

impl Frame {
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Luma in [0,1] per pixel (Rec. 601 weights).
    pub fn to_gray(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|px| {
                (0.299 * f32::from(px[0]) + 0.587 * f32::from(px[1]) + 0.114 * f32::from(px[2]))
                    / 255.0
            })
            .collect()
    }

    /// Binary PPM (P6) dump for debugging.
    pub fn save_ppm(&self, path: &Path) -> Result<(), RenderError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }
}

/// Colors and checker geometry; defaults match the bundled datasets.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderStyle {
    pub sky: [u8; 3],
    pub floor_light: [u8; 3],
    pub floor_dark: [u8; 3],
    /// Checker cell edge, m.
    pub cell: f64,
    /// Floor extent from the anchor, m.
    pub floor_extent: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            sky: [68, 120, 180],
            floor_light: [170, 170, 170],
            floor_dark: [105, 105, 105],
            cell: 1.0,
            floor_extent: 60.0,
        }
    }
}

/// Distinct hue per gate index (golden-angle spacing), full saturation.
pub fn gate_color(index: usize) -> [u8; 3] {
    let hue = (index as f64 * 137.508) % 360.0;
    hsv_to_rgb(hue, 0.85, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

#[derive(Clone, Copy)]
enum Material {
    Flat([u8; 3]),
    /// Checkerboard shaded from the interpolated world position, anchored at
    /// (ax, ay) so the pattern travels with the scene.
    Checker {
        ax: f64,
        ay: f64,
    },
}

#[derive(Clone, Copy)]
struct Vertex {
    cam: Vector3<f64>,
    world: Vector3<f64>,
}

struct Raster<'a> {
    width: usize,
    height: usize,
    color: &'a mut [u8],
    // Inverse depth buffer; larger = nearer, 0 = empty.
    inv_z: Vec<f64>,
    f: f64,
    cx: f64,
    cy: f64,
    style: RenderStyle,
}

const NEAR: f64 = 0.05;

impl<'a> Raster<'a> {
    fn shade(&self, m: &Material, world: &Vector3<f64>) -> [u8; 3] {
        match m {
            Material::Flat(c) => *c,
            Material::Checker { ax, ay } => {
                let i = (world.x - ax).div_euclid(self.style.cell) as i64
                    + (world.y - ay).div_euclid(self.style.cell) as i64;
                if i.rem_euclid(2) == 0 {
                    self.style.floor_light
                } else {
                    self.style.floor_dark
                }
            }
        }
    }

    /// Clip a triangle against the near plane, then rasterize the resulting
    /// fan with a depth test and perspective-correct world coordinates.
    fn triangle(&mut self, v0: Vertex, v1: Vertex, v2: Vertex, mat: Material) {
        let mut poly: Vec<Vertex> = Vec::with_capacity(4);
        let input = [v0, v1, v2];
        for i in 0..3 {
            let a = input[i];
            let b = input[(i + 1) % 3];
            let ain = a.cam.z > NEAR;
            let bin = b.cam.z > NEAR;
            if ain {
                poly.push(a);
            }
            if ain != bin {
                let t = (NEAR - a.cam.z) / (b.cam.z - a.cam.z);
                poly.push(Vertex {
                    cam: a.cam + (b.cam - a.cam) * t,
                    world: a.world + (b.world - a.world) * t,
                });
            }
        }
        if poly.len() < 3 {
            return;
        }
        for i in 1..poly.len() - 1 {
            self.screen_triangle(poly[0], poly[i], poly[i + 1], mat);
        }
    }

    fn screen_triangle(&mut self, v0: Vertex, v1: Vertex, v2: Vertex, mat: Material) {
        let to_screen = |v: &Vertex| {
            let iz = 1.0 / v.cam.z;
            (
                self.cx + self.f * v.cam.x * iz,
                self.cy + self.f * v.cam.y * iz,
                iz,
            )
        };
        let (x0, y0, iz0) = to_screen(&v0);
        let (x1, y1, iz1) = to_screen(&v1);
        let (x2, y2, iz2) = to_screen(&v2);

        let area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
        if area.abs() < 1e-12 {
            return;
        }
        let inv_area = 1.0 / area;

        let min_x = x0.min(x1).min(x2).floor().max(0.0) as usize;
        let max_x = (x0.max(x1).max(x2).ceil() as i64).min(self.width as i64 - 1);
        let min_y = y0.min(y1).min(y2).floor().max(0.0) as usize;
        let max_y = (y0.max(y1).max(y2).ceil() as i64).min(self.height as i64 - 1);
        if max_x < min_x as i64 || max_y < min_y as i64 {
            return;
        }

        // World position premultiplied by 1/z for perspective-correct
        // interpolation.
        let w0 = v0.world * iz0;
        let w1 = v1.world * iz1;
        let w2 = v2.world * iz2;

        for py in min_y..=max_y as usize {
            let y = py as f64;
            for px in min_x..=max_x as usize {
                let x = px as f64;
                let b0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) * inv_area;
                let b1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) * inv_area;
                let b2 = ((x0 - x) * (y1 - y) - (x1 - x) * (y0 - y)) * inv_area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let iz = b0 * iz0 + b1 * iz1 + b2 * iz2;
                let idx = py * self.width + px;
                if iz <= self.inv_z[idx] {
                    continue;
                }
                self.inv_z[idx] = iz;
                let world = (w0 * b0 + w1 * b1 + w2 * b2) / iz;
                let c = self.shade(&mat, &world);
                self.color[idx * 3..idx * 3 + 3].copy_from_slice(&c);
            }
        }
    }
}

fn gate_quads(gate: &crate::sim::Gate) -> Vec<[Vector3<f64>; 4]> {
    let c = gate.center_v();
    let r = gate.right_v();
    let u = gate.up_v();
    let hw = gate.inner_w * 0.5;
    let hh = gate.inner_h * 0.5;
    let ft = gate.frame_thickness;
    let quad = |x0: f64, x1: f64, y0: f64, y1: f64| {
        [
            c + r * x0 + u * y0,
            c + r * x1 + u * y0,
            c + r * x1 + u * y1,
            c + r * x0 + u * y1,
        ]
    };
    vec![
        quad(-hw - ft, hw + ft, hh, hh + ft),   // top band
        quad(-hw - ft, hw + ft, -hh - ft, -hh), // bottom band
        quad(-hw - ft, -hw, -hh, hh),           // left band
        quad(hw, hw + ft, -hh, hh),             // right band
    ]
}

/// Render the track from the drone's FPV camera.
pub fn render_frame(
    s: &QuadState,
    track: &Track,
    cam: &CameraModel,
    style: &RenderStyle,
    frame_id: u64,
) -> Frame {
    let mut pixels = vec![0u8; cam.width * cam.height * 3];
    for px in pixels.chunks_exact_mut(3) {
        px.copy_from_slice(&style.sky);
    }

    let r_bw = s.q.to_rotation_matrix();
    let r_wc = cam.body_to_camera() * r_bw.transpose();
    let to_cam = |p: &Vector3<f64>| r_wc * (p - s.p);
    let (cx, cy) = cam.principal_point();

    let mut raster = Raster {
        width: cam.width,
        height: cam.height,
        color: &mut pixels,
        inv_z: vec![0.0; cam.width * cam.height],
        f: cam.focal_px(),
        cx,
        cy,
        style: *style,
    };

    // Floor: one large quad anchored at the collider-bounds center so scene
    // translations move the checker pattern (and floor height) with the scene.
    let ax = (track.bounds.min[0] + track.bounds.max[0]) * 0.5;
    let ay = (track.bounds.min[1] + track.bounds.max[1]) * 0.5;
    let az = track.bounds.min[2];
    let e = style.floor_extent;
    let fl = [
        Vector3::new(ax - e, ay - e, az),
        Vector3::new(ax + e, ay - e, az),
        Vector3::new(ax + e, ay + e, az),
        Vector3::new(ax - e, ay + e, az),
    ];
    let fv: Vec<Vertex> = fl
        .iter()
        .map(|p| Vertex {
            cam: to_cam(p),
            world: *p,
        })
        .collect();
    let mat = Material::Checker { ax, ay };
    raster.triangle(fv[0], fv[1], fv[2], mat);
    raster.triangle(fv[0], fv[2], fv[3], mat);

    for gate in &track.gates {
        let color = Material::Flat(gate_color(gate.index));
        for q in gate_quads(gate) {
            let v: Vec<Vertex> = q
                .iter()
                .map(|p| Vertex {
                    cam: to_cam(p),
                    world: *p,
                })
                .collect();
            raster.triangle(v[0], v[1], v[2], color);
            raster.triangle(v[0], v[2], v[3], color);
        }
    }

    Frame {
        width: cam.width,
        height: cam.height,
        pixels,
        id: frame_id,
        t: s.t,
    }
}

const PACK_MAGIC: &[u8; 4] = b"FPK1";

/// Streaming writer for the packed-frames dataset file: header
/// `FPK1, u32 count, u32 width, u32 height` (little-endian) followed by raw
/// RGB frames.
pub struct FramePackWriter {
    file: std::fs::File,
    width: usize,
    height: usize,
    count: u32,
}

impl FramePackWriter {
    pub fn create(path: &Path, width: usize, height: usize) -> Result<Self, RenderError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(PACK_MAGIC)?;
        file.write_all(&0u32.to_le_bytes())?;
        file.write_all(&(width as u32).to_le_bytes())?;
        file.write_all(&(height as u32).to_le_bytes())?;
        Ok(Self {
            file,
            width,
            height,
            count: 0,
        })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<u32, RenderError> {
        if frame.width != self.width || frame.height != self.height {
            return Err(RenderError::BadPack(format!(
                "frame {}x{} does not match pack {}x{}",
                frame.width, frame.height, self.width, self.height
            )));
        }
        self.file.write_all(&frame.pixels)?;
        let idx = self.count;
        self.count += 1;
        Ok(idx)
    }

    pub fn finish(mut self) -> Result<u32, RenderError> {
        self.file.seek(SeekFrom::Start(4))?;
        self.file.write_all(&self.count.to_le_bytes())?;
        self.file.flush()?;
        Ok(self.count)
    }
}

/// In-memory packed-frames file.
pub struct FramePack {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    data: Vec<u8>,
}

impl FramePack {
    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 16];
        f.read_exact(&mut header)?;
        if &header[0..4] != PACK_MAGIC {
            return Err(RenderError::BadPack("bad magic".into()));
        }
        let count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        let expect = count * width * height * 3;
        if data.len() != expect {
            return Err(RenderError::BadPack(format!(
                "payload {} bytes, expected {expect}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            count,
            data,
        })
    }

    pub fn frame(&self, i: usize) -> Frame {
        let n = self.width * self.height * 3;
        Frame {
            width: self.width,
            height: self.height,
            pixels: self.data[i * n..(i + 1) * n].to_vec(),
            id: i as u64,
            t: 0.0,
        }
    }
}
