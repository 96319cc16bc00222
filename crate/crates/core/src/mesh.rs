//! Graded 2-D simplicial meshes of the domain between two Wulff
//! inclusions and a concentric Wulff outer boundary.
//!
//! The same mesher serves the planar problem and, with the `axisym`
//! flag, the meridian half-domain of the axisymmetric 3-D problem (the
//! `x`-coordinate is then the cylindrical radius and element volumes
//! carry a `2πr` weight in assembly).

use nalgebra::DVector;
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::geometry::WulffConfig;
use crate::norms::NormModel;

/// Vertex/boundary classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Interior,
    Outer,
    Inclusion1,
    Inclusion2,
    /// Symmetry axis of the meridian domain (natural boundary).
    Axis,
}

/// Mesh-size field and budget parameters.
#[derive(Debug, Clone)]
pub struct Grading {
    /// Floor of the target element size (clamped to `δ/k_gap`).
    pub h_min: f64,
    /// Far-field element size.
    pub h_max: f64,
    /// Growth slope: `h(x) = clamp(θ·|x − gap|, h_min, h_max)`.
    pub theta: f64,
    /// Minimum element layers across the gap.
    pub k_gap: usize,
    pub max_elements: usize,
}

impl Default for Grading {
    fn default() -> Self {
        Grading {
            h_min: 1e-4,
            h_max: 0.5,
            theta: 0.35,
            k_gap: 8,
            max_elements: 400_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    /// Vertex coordinates, `(x, y)`; in meridian meshes `x` is the
    /// cylindrical radius.
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub vertex_tag: Vec<Tag>,
    /// Boundary edges of the kept region with their tags.
    pub boundary_edges: Vec<([usize; 2], Tag)>,
    pub axisym: bool,
    pub min_angle_deg: f64,
}

impl Mesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])).abs()
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        [
            (p[0] + q[0] + r[0]) / 3.0,
            (p[1] + q[1] + r[1]) / 3.0,
        ]
    }

    /// Assembly weight of a triangle: its area, times `2π r̄` for
    /// meridian meshes.
    pub fn weight(&self, t: usize) -> f64 {
        let a = self.triangle_area(t);
        if self.axisym {
            a * 2.0 * std::f64::consts::PI * self.centroid(t)[0]
        } else {
            a
        }
    }

    /// Plain-text export: vertex table, triangle table, tagged boundary
    /// edges.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# mesh vertices={} triangles={} axisym={}\n",
            self.vertices.len(),
            self.triangles.len(),
            self.axisym
        ));
        out.push_str("vertices\n");
        for (v, tag) in self.vertices.iter().zip(&self.vertex_tag) {
            out.push_str(&format!("{:.17e} {:.17e} {:?}\n", v[0], v[1], tag));
        }
        out.push_str("triangles\n");
        for t in &self.triangles {
            out.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        out.push_str("boundary_edges\n");
        for (e, tag) in &self.boundary_edges {
            out.push_str(&format!("{} {} {:?}\n", e[0], e[1], tag));
        }
        out
    }
}

/// Target element size at a point, graded toward the gap midpoint at
/// the origin.
fn size_field(p: [f64; 2], g: &Grading, h_floor: f64) -> f64 {
    let d = (p[0] * p[0] + p[1] * p[1]).sqrt();
    (g.theta * d).clamp(h_floor, g.h_max)
}

/// Upper equivalence constant `L` with `H₀(x) ≤ L·|x|`, by direction
/// sampling.
fn dual_upper_constant(norm: &NormModel) -> f64 {
    let mut l: f64 = 0.0;
    for k in 0..64 {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
        l = l.max(norm.dual(&DVector::from_vec(vec![phi.cos(), phi.sin()])));
    }
    l * 1.01
}

/// Samples a closed parametric loop with spacing following the size
/// field: scans a fine polyline and emits a vertex whenever the chord
/// since the last one reaches the local `h`.
fn sample_loop<F: Fn(f64) -> [f64; 2]>(
    curve: F,
    t0: f64,
    t1: f64,
    closed: bool,
    g: &Grading,
    h_floor: f64,
) -> Vec<[f64; 2]> {
    let fine = 16_384;
    let mut pts = Vec::new();
    let mut last = curve(t0);
    pts.push(last);
    for k in 1..=fine {
        let t = t0 + (t1 - t0) * k as f64 / fine as f64;
        let p = curve(t);
        let chord = ((p[0] - last[0]).powi(2) + (p[1] - last[1]).powi(2)).sqrt();
        if chord >= size_field(p, g, h_floor) {
            pts.push(p);
            last = p;
        }
    }
    // keep the endpoint for open curves; for closed loops drop a final
    // vertex that crowds the start
    let first = pts[0];
    let end = curve(t1);
    let close_gap = |a: [f64; 2], b: [f64; 2]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    if closed {
        if pts.len() > 2 && close_gap(*pts.last().unwrap(), first) < 0.5 * size_field(first, g, h_floor) {
            pts.pop();
        }
    } else if close_gap(*pts.last().unwrap(), end) > 1e-12 {
        if pts.len() > 1 && close_gap(*pts.last().unwrap(), end) < 0.5 * size_field(end, g, h_floor)
        {
            pts.pop();
        }
        pts.push(end);
    }
    pts
}

/// A boundary loop: polyline vertices plus their tag; `closed` joins the
/// last vertex back to the first with a constraint edge.
struct Loop {
    points: Vec<[f64; 2]>,
    tags: Vec<Tag>,
    closed: bool,
}

/// Membership and clearance oracle for triangle filtering and interior
/// point placement.
struct Domain<'a> {
    cfg: &'a WulffConfig,
    r_out: f64,
    l_up: f64,
    axisym: bool,
}

impl Domain<'_> {
    fn vec(&self, p: [f64; 2]) -> DVector<f64> {
        DVector::from_vec(vec![p[0], p[1]])
    }

    /// Signed Euclidean-scale clearance from all domain boundaries
    /// (positive inside).
    fn clearance(&self, p: [f64; 2]) -> f64 {
        let x = self.vec(p);
        let d_out = (self.r_out - self.cfg.norm.dual(&x)) / self.l_up;
        let d1 = (self.cfg.norm.dual(&(&x - &self.cfg.shape1.center)) - self.cfg.shape1.radius)
            / self.l_up;
        let d2 = (self.cfg.norm.dual(&(&x - &self.cfg.shape2.center)) - self.cfg.shape2.radius)
            / self.l_up;
        let mut c = d_out.min(d1).min(d2);
        if self.axisym {
            c = c.min(p[0]);
        }
        c
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        let x = self.vec(p);
        self.cfg.norm.dual(&x) < self.r_out
            && self.cfg.norm.dual(&(&x - &self.cfg.shape1.center)) > self.cfg.shape1.radius
            && self.cfg.norm.dual(&(&x - &self.cfg.shape2.center)) > self.cfg.shape2.radius
            && (!self.axisym || p[0] > 0.0)
    }
}

/// Builds the graded planar mesh of the two-inclusion domain with a
/// concentric Wulff outer boundary of dual radius `r_out`.
pub fn build_mesh(cfg: &WulffConfig, r_out: f64, grading: &Grading) -> Result<Mesh> {
    if cfg.norm.dim() != 2 {
        return Err(Error::Domain(
            "planar mesher needs a 2-D norm; use the meridian builder for N = 3".into(),
        ));
    }
    if cfg.delta <= 0.0 {
        return Err(Error::Config("mesh needs delta > 0".into()));
    }
    let h_floor = grading
        .h_min
        .min(cfg.delta / grading.k_gap as f64)
        .max(1e-9);
    let boundary_gap = cfg.norm.dual(&cfg.shape1.center) + cfg.shape1.radius;
    if r_out < 1.5 * boundary_gap {
        return Err(Error::Config(
            "outer radius too close to the inclusions".into(),
        ));
    }

    let wulff_point = |center: &DVector<f64>, radius: f64, phi: f64| -> [f64; 2] {
        let dir = DVector::from_vec(vec![phi.cos(), phi.sin()]);
        let p = center + &dir * (radius / cfg.norm.dual(&dir));
        [p[0], p[1]]
    };

    let tau = 2.0 * std::f64::consts::PI;
    let outer_pts = sample_loop(
        |t| wulff_point(&DVector::zeros(2), r_out, t),
        0.0,
        tau,
        true,
        grading,
        h_floor,
    );
    let inc1_pts = sample_loop(
        |t| wulff_point(&cfg.shape1.center, cfg.shape1.radius, t),
        0.0,
        tau,
        true,
        grading,
        h_floor,
    );
    let inc2_pts = sample_loop(
        |t| wulff_point(&cfg.shape2.center, cfg.shape2.radius, t),
        0.0,
        tau,
        true,
        grading,
        h_floor,
    );
    let loops = vec![
        Loop {
            tags: vec![Tag::Outer; outer_pts.len()],
            points: outer_pts,
            closed: true,
        },
        Loop {
            tags: vec![Tag::Inclusion1; inc1_pts.len()],
            points: inc1_pts,
            closed: true,
        },
        Loop {
            tags: vec![Tag::Inclusion2; inc2_pts.len()],
            points: inc2_pts,
            closed: true,
        },
    ];
    let domain = Domain {
        cfg,
        r_out,
        l_up: dual_upper_constant(&cfg.norm),
        axisym: false,
    };
    triangulate(loops, &domain, grading, h_floor, false)
}

/// Builds the meridian half-domain mesh for the axisymmetric 3-D
/// problem, given the 2-D section of the geometry (`x` = cylindrical
/// radius, `y` = axial coordinate).
pub fn build_meridian_mesh(cfg: &WulffConfig, r_out: f64, grading: &Grading) -> Result<Mesh> {
    if cfg.norm.dim() != 2 {
        return Err(Error::Domain("meridian mesher takes the 2-D section norm".into()));
    }
    if cfg.delta <= 0.0 {
        return Err(Error::Config("mesh needs delta > 0".into()));
    }
    let h_floor = grading
        .h_min
        .min(cfg.delta / grading.k_gap as f64)
        .max(1e-9);

    let wulff_point = |center: &DVector<f64>, radius: f64, phi: f64| -> [f64; 2] {
        let dir = DVector::from_vec(vec![phi.cos(), phi.sin()]);
        let p = center + &dir * (radius / cfg.norm.dual(&dir));
        let x = if p[0].abs() < 1e-12 { 0.0 } else { p[0].max(0.0) };
        [x, p[1]]
    };
    let pole = |center: &DVector<f64>, radius: f64, up: bool| -> [f64; 2] {
        wulff_point(center, radius, if up { std::f64::consts::FRAC_PI_2 } else { -std::f64::consts::FRAC_PI_2 })
    };

    let half = std::f64::consts::FRAC_PI_2;
    // one closed loop: south outer pole → D² south pole (axis), D²
    // meridian, gap axis segment, D¹ meridian, axis to north outer
    // pole, outer meridian arc back.
    let origin = DVector::zeros(2);
    let out_s = pole(&origin, r_out, false);
    let out_n = pole(&origin, r_out, true);
    let d2_s = pole(&cfg.shape2.center, cfg.shape2.radius, false);
    let d2_n = pole(&cfg.shape2.center, cfg.shape2.radius, true);
    let d1_s = pole(&cfg.shape1.center, cfg.shape1.radius, false);
    let d1_n = pole(&cfg.shape1.center, cfg.shape1.radius, true);

    let seg = |a: [f64; 2], b: [f64; 2]| {
        move |t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };
    let mut points: Vec<[f64; 2]> = Vec::new();
    let mut tags: Vec<Tag> = Vec::new();
    let push_piece = |pts: Vec<[f64; 2]>, tag: Tag, points: &mut Vec<[f64; 2]>, tags: &mut Vec<Tag>| {
        for (i, p) in pts.iter().enumerate() {
            if i == 0 && !points.is_empty() {
                continue; // piece start coincides with previous end
            }
            points.push(*p);
            tags.push(tag);
        }
    };
    push_piece(
        sample_loop(seg(out_s, d2_s), 0.0, 1.0, false, grading, h_floor),
        Tag::Axis,
        &mut points,
        &mut tags,
    );
    // override the joint vertices: poles belong to their Dirichlet curve
    *tags.first_mut().unwrap() = Tag::Outer;
    *tags.last_mut().unwrap() = Tag::Inclusion2;
    let mark = points.len();
    push_piece(
        sample_loop(
            |t| wulff_point(&cfg.shape2.center, cfg.shape2.radius, t),
            -half,
            half,
            false,
            grading,
            h_floor,
        ),
        Tag::Inclusion2,
        &mut points,
        &mut tags,
    );
    let _ = mark;
    push_piece(
        sample_loop(seg(d2_n, d1_s), 0.0, 1.0, false, grading, h_floor),
        Tag::Axis,
        &mut points,
        &mut tags,
    );
    *tags.last_mut().unwrap() = Tag::Inclusion1;
    push_piece(
        sample_loop(
            |t| wulff_point(&cfg.shape1.center, cfg.shape1.radius, t),
            -half,
            half,
            false,
            grading,
            h_floor,
        ),
        Tag::Inclusion1,
        &mut points,
        &mut tags,
    );
    push_piece(
        sample_loop(seg(d1_n, out_n), 0.0, 1.0, false, grading, h_floor),
        Tag::Axis,
        &mut points,
        &mut tags,
    );
    *tags.last_mut().unwrap() = Tag::Outer;
    // outer meridian arc from north pole back toward the south pole
    // through positive radius; drop its final vertex (the loop-closing
    // edge supplies it)
    let mut arc = sample_loop(
        |t| wulff_point(&origin, r_out, t),
        half,
        -half,
        false,
        grading,
        h_floor,
    );
    arc.pop();
    push_piece(arc, Tag::Outer, &mut points, &mut tags);

    let loops = vec![Loop {
        points,
        tags,
        closed: true,
    }];
    let domain = Domain {
        cfg,
        r_out,
        l_up: dual_upper_constant(&cfg.norm),
        axisym: true,
    };
    triangulate(loops, &domain, grading, h_floor, true)
}

fn triangulate(
    loops: Vec<Loop>,
    domain: &Domain,
    grading: &Grading,
    h_floor: f64,
    axisym: bool,
) -> Result<Mesh> {
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::new();
    let mut tag_of: Vec<(Point2<f64>, Tag)> = Vec::new();

    for lp in &loops {
        let mut handles = Vec::with_capacity(lp.points.len());
        for (p, t) in lp.points.iter().zip(&lp.tags) {
            let pt = Point2::new(p[0], p[1]);
            let h = cdt
                .insert(pt)
                .map_err(|e| Error::Numeric(format!("vertex insertion failed: {e:?}")))?;
            handles.push(h);
            tag_of.push((pt, *t));
        }
        let m = handles.len();
        let upper = if lp.closed { m } else { m - 1 };
        for i in 0..upper {
            let (a, b) = (handles[i], handles[(i + 1) % m]);
            if a != b {
                cdt.add_constraint(a, b);
            }
        }
    }

    // graded interior points: per-level grids, kept where the local size
    // field matches the level spacing and clearance allows
    let bb = loops
        .iter()
        .flat_map(|l| l.points.iter())
        .fold([f64::MAX, f64::MIN, f64::MAX, f64::MIN], |acc, p| {
            [
                acc[0].min(p[0]),
                acc[1].max(p[0]),
                acc[2].min(p[1]),
                acc[3].max(p[1]),
            ]
        });
    let mut spacing = grading.h_max;
    let mut inserted = loops.iter().map(|l| l.points.len()).sum::<usize>();
    loop {
        let coarsest = spacing == grading.h_max;
        let finest = spacing / 2.0 < h_floor * 0.999;
        // a level only populates where the size field lies in its band;
        // outside the coarsest level that region is a ball around the
        // gap of radius 2·spacing/θ, so restrict the scan to it
        let level_bb = if coarsest {
            bb
        } else {
            let r_lim = 2.0 * spacing / grading.theta + spacing;
            [
                bb[0].max(-r_lim),
                bb[1].min(r_lim),
                bb[2].max(-r_lim),
                bb[3].min(r_lim),
            ]
        };
        let nx = ((level_bb[1] - level_bb[0]) / spacing).ceil().max(0.0) as i64;
        let ny = ((level_bb[3] - level_bb[2]) / spacing).ceil().max(0.0) as i64;
        for i in 0..nx {
            for j in 0..ny {
                let p = [
                    level_bb[0] + (i as f64 + 0.5) * spacing,
                    level_bb[2] + (j as f64 + 0.5) * spacing,
                ];
                let h = size_field(p, grading, h_floor);
                let band = (h >= spacing || finest) && (h < 2.0 * spacing || coarsest);
                if band && domain.clearance(p) > 0.6 * spacing {
                    cdt.insert(Point2::new(p[0], p[1]))
                        .map_err(|e| Error::Numeric(format!("insertion failed: {e:?}")))?;
                    inserted += 1;
                    if inserted > 4 * grading.max_elements {
                        return Err(Error::Resource(format!(
                            "mesh budget exceeded ({inserted} vertices); increase theta ({}) or h_min",
                            grading.theta
                        )));
                    }
                }
            }
        }
        if finest {
            break;
        }
        spacing /= 2.0;
    }

    // harvest kept triangles
    let find_tag = |p: Point2<f64>| -> Tag {
        for (q, t) in &tag_of {
            if (q.x - p.x).abs() < 1e-13 && (q.y - p.y).abs() < 1e-13 {
                return *t;
            }
        }
        Tag::Interior
    };

    let mut index_of = vec![usize::MAX; cdt.num_vertices()];
    let mut vertices = Vec::new();
    let mut vertex_tag = Vec::new();
    let mut triangles = Vec::new();
    let mut min_angle = f64::MAX;
    for face in cdt.inner_faces() {
        let vs = face.vertices();
        let ps: Vec<Point2<f64>> = vs.iter().map(|v| v.position()).collect();
        let centroid = [
            (ps[0].x + ps[1].x + ps[2].x) / 3.0,
            (ps[0].y + ps[1].y + ps[2].y) / 3.0,
        ];
        if !domain.contains(centroid) {
            continue;
        }
        let area = 0.5
            * ((ps[1].x - ps[0].x) * (ps[2].y - ps[0].y)
                - (ps[1].y - ps[0].y) * (ps[2].x - ps[0].x))
                .abs();
        if area < 1e-13 {
            // degenerate sliver from collinear boundary samples
            continue;
        }
        let mut tri = [0usize; 3];
        for (k, v) in vs.iter().enumerate() {
            let idx = v.fix().index();
            if index_of[idx] == usize::MAX {
                index_of[idx] = vertices.len();
                vertices.push([ps[k].x, ps[k].y]);
                vertex_tag.push(find_tag(ps[k]));
            }
            tri[k] = index_of[idx];
        }
        min_angle = min_angle.min(triangle_min_angle(
            vertices[tri[0]],
            vertices[tri[1]],
            vertices[tri[2]],
        ));
        triangles.push(tri);
    }
    if triangles.len() > grading.max_elements {
        return Err(Error::Resource(format!(
            "mesh has {} elements over the budget {}; increase theta ({})",
            triangles.len(),
            grading.max_elements,
            grading.theta
        )));
    }
    if triangles.is_empty() {
        return Err(Error::Numeric("triangulation produced no elements".into()));
    }

    let boundary_edges = boundary_edges_of(&triangles, &vertex_tag);
    Ok(Mesh {
        vertices,
        triangles,
        vertex_tag,
        boundary_edges,
        axisym,
        min_angle_deg: min_angle.to_degrees(),
    })
}

fn triangle_min_angle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let (la, lb, lc) = (d(b, c), d(a, c), d(a, b));
    let angle = |opp: f64, s1: f64, s2: f64| {
        ((s1 * s1 + s2 * s2 - opp * opp) / (2.0 * s1 * s2)).clamp(-1.0, 1.0).acos()
    };
    angle(la, lb, lc).min(angle(lb, la, lc)).min(angle(lc, la, lb))
}

/// Edges appearing in exactly one kept triangle, tagged from their
/// endpoint tags.
fn boundary_edges_of(
    triangles: &[[usize; 3]],
    vertex_tag: &[Tag],
) -> Vec<([usize; 2], Tag)> {
    use std::collections::HashMap;
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            let key = (a.min(b), a.max(b));
            *count.entry(key).or_insert(0) += 1;
        }
    }
    let mut out = Vec::new();
    for ((a, b), c) in count {
        if c == 1 {
            let tag = match (vertex_tag[a], vertex_tag[b]) {
                (x, y) if x == y => x,
                (Tag::Interior, y) => y,
                (x, Tag::Interior) => x,
                // at meridian corners the pole vertex carries the
                // Dirichlet/tied tag; the edge belongs to the other side
                (Tag::Axis, y) => y,
                (x, Tag::Axis) => x,
                (x, _) => x,
            };
            out.push(([a, b], tag));
        }
    }
    out
}

/// Radial projection onto the exact Wulff boundaries of a two-inclusion
/// configuration, for boundary-midpoint placement during refinement.
pub fn wulff_projector(
    cfg: &WulffConfig,
    r_out: f64,
) -> impl Fn([f64; 2], Tag) -> [f64; 2] + '_ {
    move |p, tag| {
        let (center, radius) = match tag {
            Tag::Outer => (DVector::zeros(2), r_out),
            Tag::Inclusion1 => (cfg.shape1.center.clone(), cfg.shape1.radius),
            Tag::Inclusion2 => (cfg.shape2.center.clone(), cfg.shape2.radius),
            _ => return p,
        };
        radial_project(&cfg.norm, &center, radius, p)
    }
}

/// Projection variant for the single-inclusion annulus around the
/// origin (inner dual radius `r`, outer `r_out`).
pub fn annulus_projector(
    norm: &NormModel,
    r: f64,
    r_out: f64,
) -> impl Fn([f64; 2], Tag) -> [f64; 2] + '_ {
    move |p, tag| {
        let radius = match tag {
            Tag::Outer => r_out,
            Tag::Inclusion1 => r,
            _ => return p,
        };
        radial_project(norm, &DVector::zeros(2), radius, p)
    }
}

fn radial_project(norm: &NormModel, center: &DVector<f64>, radius: f64, p: [f64; 2]) -> [f64; 2] {
    let rel = DVector::from_vec(vec![p[0] - center[0], p[1] - center[1]]);
    let h0 = norm.dual(&rel);
    if h0 <= 0.0 {
        return p;
    }
    let q = center + rel * (radius / h0);
    [q[0], q[1]]
}

/// Uniform refinement by edge midpoints; midpoints of tagged boundary
/// edges are placed by `project` (radial projection back onto the exact
/// Wulff curve).
pub fn refine_uniform(mesh: &Mesh, project: &impl Fn([f64; 2], Tag) -> [f64; 2]) -> Mesh {
    use std::collections::HashMap;
    let mut vertices = mesh.vertices.clone();
    let mut vertex_tag = mesh.vertex_tag.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edge_tag: HashMap<(usize, usize), Tag> = HashMap::new();
    for (e, t) in &mesh.boundary_edges {
        edge_tag.insert((e[0].min(e[1]), e[0].max(e[1])), *t);
    }

    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    let mut mid = |a: usize,
                   b: usize,
                   vertices: &mut Vec<[f64; 2]>,
                   vertex_tag: &mut Vec<Tag>|
     -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&m) = midpoint.get(&key) {
            return m;
        }
        let (p, q) = (vertices[a], vertices[b]);
        let mut m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        let tag = edge_tag.get(&key).copied().unwrap_or(Tag::Interior);
        if !matches!(tag, Tag::Interior) {
            m = project(m, tag);
        }
        let idx = vertices.len();
        vertices.push(m);
        vertex_tag.push(tag);
        midpoint.insert(key, idx);
        idx
    };
    for t in &mesh.triangles {
        let [a, b, c] = *t;
        let ab = mid(a, b, &mut vertices, &mut vertex_tag);
        let bc = mid(b, c, &mut vertices, &mut vertex_tag);
        let ca = mid(c, a, &mut vertices, &mut vertex_tag);
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }
    let boundary_edges = boundary_edges_of(&triangles, &vertex_tag);
    let mut min_angle = f64::MAX;
    for t in &triangles {
        min_angle = min_angle.min(triangle_min_angle(
            vertices[t[0]],
            vertices[t[1]],
            vertices[t[2]],
        ));
    }
    Mesh {
        vertices,
        triangles,
        vertex_tag,
        boundary_edges,
        axisym: mesh.axisym,
        min_angle_deg: min_angle.to_degrees(),
    }
}

/// Structured annulus mesh between Wulff circles of dual radii `r` and
/// `r_out`: a radial-by-angular product grid, each quad split along the
/// shorter diagonal. Convergence oracles use this for clean constants.
pub fn build_structured_annulus(
    norm: &NormModel,
    r: f64,
    r_out: f64,
    n_radial: usize,
    n_angular: usize,
) -> Result<Mesh> {
    if norm.dim() != 2 {
        return Err(Error::Domain("annulus mesher needs a 2-D norm".into()));
    }
    if !(0.0 < r && r < r_out) || n_radial < 1 || n_angular < 3 {
        return Err(Error::Config("bad structured annulus parameters".into()));
    }
    let mut vertices = Vec::with_capacity((n_radial + 1) * n_angular);
    let mut vertex_tag = Vec::with_capacity(vertices.capacity());
    for i in 0..=n_radial {
        // geometric radii match the logarithmic radial profile
        let s = r * (r_out / r).powf(i as f64 / n_radial as f64);
        for j in 0..n_angular {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n_angular as f64;
            let dir = DVector::from_vec(vec![phi.cos(), phi.sin()]);
            let p = &dir * (s / norm.dual(&dir));
            vertices.push([p[0], p[1]]);
            vertex_tag.push(if i == 0 {
                Tag::Inclusion1
            } else if i == n_radial {
                Tag::Outer
            } else {
                Tag::Interior
            });
        }
    }
    let idx = |i: usize, j: usize| i * n_angular + (j % n_angular);
    let mut triangles = Vec::with_capacity(2 * n_radial * n_angular);
    let mut min_angle = f64::MAX;
    let dist2 = |a: usize, b: usize| {
        let (p, q) = (vertices[a], vertices[b]);
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
    };
    for i in 0..n_radial {
        for j in 0..n_angular {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            let pair = if dist2(a, c) <= dist2(b, d) {
                [[a, b, c], [a, c, d]]
            } else {
                [[a, b, d], [b, c, d]]
            };
            for t in pair {
                min_angle = min_angle.min(triangle_min_angle(
                    vertices[t[0]],
                    vertices[t[1]],
                    vertices[t[2]],
                ));
                triangles.push(t);
            }
        }
    }
    let boundary_edges = boundary_edges_of(&triangles, &vertex_tag);
    Ok(Mesh {
        vertices,
        triangles,
        vertex_tag,
        boundary_edges,
        axisym: false,
        min_angle_deg: min_angle.to_degrees(),
    })
}

/// Structured meridian half-annulus (`x ≥ 0`, axisymmetric weights):
/// the product grid of geometric radii and angles in `[−π/2, π/2]`,
/// used by the N = 3 annulus convergence oracle.
pub fn build_structured_half_annulus(
    norm: &NormModel,
    r: f64,
    r_out: f64,
    n_radial: usize,
    n_angular: usize,
) -> Result<Mesh> {
    if norm.dim() != 2 {
        return Err(Error::Domain("annulus mesher needs a 2-D norm".into()));
    }
    if !(0.0 < r && r < r_out) || n_radial < 1 || n_angular < 2 {
        return Err(Error::Config("bad structured annulus parameters".into()));
    }
    let half = std::f64::consts::FRAC_PI_2;
    let mut vertices = Vec::with_capacity((n_radial + 1) * (n_angular + 1));
    let mut vertex_tag = Vec::with_capacity(vertices.capacity());
    for i in 0..=n_radial {
        let s = r * (r_out / r).powf(i as f64 / n_radial as f64);
        for j in 0..=n_angular {
            let phi = -half + std::f64::consts::PI * j as f64 / n_angular as f64;
            let dir = DVector::from_vec(vec![phi.cos(), phi.sin()]);
            let p = &dir * (s / norm.dual(&dir));
            let x = if p[0].abs() < 1e-12 { 0.0 } else { p[0] };
            vertices.push([x, p[1]]);
            vertex_tag.push(if i == 0 {
                Tag::Inclusion1
            } else if i == n_radial {
                Tag::Outer
            } else if j == 0 || j == n_angular {
                Tag::Axis
            } else {
                Tag::Interior
            });
        }
    }
    let cols = n_angular + 1;
    let idx = |i: usize, j: usize| i * cols + j;
    let mut triangles = Vec::with_capacity(2 * n_radial * n_angular);
    let mut min_angle = f64::MAX;
    let dist2 = |a: usize, b: usize| {
        let (p, q) = (vertices[a], vertices[b]);
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
    };
    for i in 0..n_radial {
        for j in 0..n_angular {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            let pair = if dist2(a, c) <= dist2(b, d) {
                [[a, b, c], [a, c, d]]
            } else {
                [[a, b, d], [b, c, d]]
            };
            for t in pair {
                min_angle = min_angle.min(triangle_min_angle(
                    vertices[t[0]],
                    vertices[t[1]],
                    vertices[t[2]],
                ));
                triangles.push(t);
            }
        }
    }
    let boundary_edges = boundary_edges_of(&triangles, &vertex_tag);
    Ok(Mesh {
        vertices,
        triangles,
        vertex_tag,
        boundary_edges,
        axisym: true,
        min_angle_deg: min_angle.to_degrees(),
    })
}

/// Single-inclusion annulus mesh (for the closed-form oracle): Wulff
/// annulus between dual radii `r` and `r_out` around the origin.
pub fn build_annulus_mesh(
    norm: &NormModel,
    r: f64,
    r_out: f64,
    h: f64,
    axisym: bool,
) -> Result<Mesh> {
    if norm.dim() != 2 {
        return Err(Error::Domain("annulus mesher needs a 2-D norm".into()));
    }
    // reuse the two-inclusion machinery with a fictitious second shape
    // far outside the outer boundary is not possible; build directly.
    let grading = Grading {
        h_min: h,
        h_max: h,
        theta: 1e9, // uniform: clamp always hits h_max = h
        k_gap: 1,
        max_elements: 2_000_000,
    };
    let wulff_point = |radius: f64, phi: f64| -> [f64; 2] {
        let dir = DVector::from_vec(vec![phi.cos(), phi.sin()]);
        let p = &dir * (radius / norm.dual(&dir));
        [p[0], p[1]]
    };
    let tau = 2.0 * std::f64::consts::PI;
    let half = std::f64::consts::FRAC_PI_2;
    let mut loops = Vec::new();
    if axisym {
        let seg = |a: [f64; 2], b: [f64; 2]| {
            move |t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        };
        let mut points = Vec::new();
        let mut tags = Vec::new();
        let out_s = wulff_point(r_out, -half);
        let in_s = wulff_point(r, -half);
        let in_n = wulff_point(r, half);
        let out_n = wulff_point(r_out, half);
        let push = |pts: Vec<[f64; 2]>, tag: Tag, points: &mut Vec<[f64; 2]>, tags: &mut Vec<Tag>| {
            for (i, p) in pts.iter().enumerate() {
                if i == 0 && !points.is_empty() {
                    continue;
                }
                let x = if p[0].abs() < 1e-12 { 0.0 } else { p[0].max(0.0) };
                points.push([x, p[1]]);
                tags.push(tag);
            }
        };
        push(
            sample_loop(seg(out_s, in_s), 0.0, 1.0, false, &grading, h),
            Tag::Axis,
            &mut points,
            &mut tags,
        );
        *tags.first_mut().unwrap() = Tag::Outer;
        *tags.last_mut().unwrap() = Tag::Inclusion1;
        push(
            sample_loop(|t| wulff_point(r, t), -half, half, false, &grading, h),
            Tag::Inclusion1,
            &mut points,
            &mut tags,
        );
        push(
            sample_loop(seg(in_n, out_n), 0.0, 1.0, false, &grading, h),
            Tag::Axis,
            &mut points,
            &mut tags,
        );
        *tags.last_mut().unwrap() = Tag::Outer;
        let mut arc = sample_loop(|t| wulff_point(r_out, t), half, -half, false, &grading, h);
        arc.pop();
        push(arc, Tag::Outer, &mut points, &mut tags);
        loops.push(Loop {
            points,
            tags,
            closed: true,
        });
    } else {
        let outer = sample_loop(|t| wulff_point(r_out, t), 0.0, tau, true, &grading, h);
        let inner = sample_loop(|t| wulff_point(r, t), 0.0, tau, true, &grading, h);
        loops.push(Loop {
            tags: vec![Tag::Outer; outer.len()],
            points: outer,
            closed: true,
        });
        loops.push(Loop {
            tags: vec![Tag::Inclusion1; inner.len()],
            points: inner,
            closed: true,
        });
    }
    // fictitious config for the clearance oracle: second shape far away
    let far = DVector::from_vec(vec![1e6, 1e6]);
    let cfg = WulffConfig {
        norm: norm.clone(),
        shape1: crate::geometry::WulffShape::new(DVector::zeros(2), r),
        shape2: crate::geometry::WulffShape::new(far, 1.0),
        delta: 1.0,
        p0: DVector::zeros(2),
        p_hat: DVector::from_vec(vec![0.0, 1.0]),
        q: nalgebra::DMatrix::identity(1, 1),
    };
    let domain = Domain {
        cfg: &cfg,
        r_out,
        l_up: dual_upper_constant(norm),
        axisym,
    };
    triangulate(loops, &domain, &grading, h, axisym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn euclid_cfg(delta: f64) -> WulffConfig {
        WulffConfig::canonical(NormModel::euclidean(2), 1.0, 1.0, delta).unwrap()
    }

    #[test]
    fn coarse_mesh_smoke() {
        let cfg = euclid_cfg(0.1);
        let g = Grading::default();
        let mesh = build_mesh(&cfg, 8.0, &g).unwrap();
        assert!(mesh.triangles.len() > 100);
        assert!(mesh.min_angle_deg > 5.0);
        // conforming: every interior edge shared by exactly 2 triangles
        // (boundary_edges_of would have returned them otherwise); check
        // boundary edges carry real tags
        assert!(mesh
            .boundary_edges
            .iter()
            .all(|(_, t)| !matches!(t, Tag::Interior)));
        // all three boundary groups present
        for tag in [Tag::Outer, Tag::Inclusion1, Tag::Inclusion2] {
            assert!(mesh.boundary_edges.iter().any(|(_, t)| *t == tag));
        }
        // vertices on inclusion boundaries lie on the exact Wulff curve
        for (v, t) in mesh.vertices.iter().zip(&mesh.vertex_tag) {
            if *t == Tag::Inclusion1 {
                let x = DVector::from_vec(vec![v[0], v[1]]);
                let d = cfg.norm.dual(&(&x - &cfg.shape1.center));
                assert!((d - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gap_resolution_contract() {
        let delta = 1e-3;
        let cfg = euclid_cfg(delta);
        let g = Grading::default();
        let mesh = build_mesh(&cfg, 8.0, &g).unwrap();
        // smallest element near the gap is at most delta/k_gap in size
        let mut min_h = f64::MAX;
        for t in 0..mesh.triangles.len() {
            let c = mesh.centroid(t);
            if c[0].abs() < 0.05 && c[1].abs() < 0.05 {
                min_h = min_h.min(mesh.triangle_area(t).sqrt());
            }
        }
        assert!(
            min_h <= delta / g.k_gap as f64 * 2.0,
            "gap elements too large: {min_h}"
        );
        // at least k_gap vertex layers across the gap on the axis strip
        let mut gap_vertices = 0;
        for v in &mesh.vertices {
            if v[0].abs() < delta && v[1].abs() < delta / 2.0 {
                gap_vertices += 1;
            }
        }
        assert!(gap_vertices >= g.k_gap, "only {gap_vertices} gap vertices");
    }

    #[test]
    fn grading_count_scaling() {
        let cfg = euclid_cfg(0.05);
        let g1 = Grading {
            h_min: 4e-3,
            ..Grading::default()
        };
        let g2 = Grading {
            h_min: 2e-3,
            ..Grading::default()
        };
        let count = |g: &Grading| {
            let mesh = build_mesh(&cfg, 8.0, g).unwrap();
            // fixed metric ball around the gap for both meshes
            let lim = 8.0 * 4e-3;
            (0..mesh.triangles.len())
                .filter(|&t| {
                    let c = mesh.centroid(t);
                    (c[0] * c[0] + c[1] * c[1]).sqrt() < lim
                })
                .count() as f64
        };
        // the near-gap count per fixed metric ball ~ h^{-2}; compare the
        // counts inside each mesh's own graded core: halving h_min should
        // grow the core population roughly 4x (allow a wide band)
        let (c1, c2) = (count(&g1), count(&g2));
        let ratio = c2 / c1;
        assert!(
            ratio > 2.0 && ratio < 8.0,
            "refinement scaling ratio {ratio} (counts {c1}, {c2})"
        );
    }

    #[test]
    fn budget_error() {
        let cfg = euclid_cfg(1e-4);
        let g = Grading {
            max_elements: 500,
            ..Grading::default()
        };
        match build_mesh(&cfg, 8.0, &g) {
            Err(Error::Resource(msg)) => assert!(msg.contains("theta")),
            other => panic!("expected resource error, got {other:?}"),
        }
    }

    #[test]
    fn annulus_and_refinement() {
        let norm = NormModel::ellipse(DMatrix::from_diagonal(
            &DVector::from_vec(vec![1.0, 2.0]),
        ))
        .unwrap();
        let mesh = build_annulus_mesh(&norm, 1.0, 2.0, 0.2, false).unwrap();
        let fine = refine_uniform(&mesh, &annulus_projector(&norm, 1.0, 2.0));
        assert_eq!(fine.triangles.len(), 4 * mesh.triangles.len());
        // refined boundary vertices projected onto the exact curves:
        // total area converges toward the annulus area from inside
        let area = |m: &Mesh| (0..m.triangles.len()).map(|t| m.triangle_area(t)).sum::<f64>();
        // Wulff ball area for diag(1,2): H₀² = x² + y²/2 → ellipse
        // semi-axes 1, √2 → area π√2(R² − r²)
        let exact = std::f64::consts::PI * 2.0f64.sqrt() * (4.0 - 1.0);
        let (a1, a2) = (area(&mesh), area(&fine));
        assert!((a2 - exact).abs() < (a1 - exact).abs());
        assert!((a2 - exact).abs() / exact < 0.02);
    }

    #[test]
    fn meridian_mesh_smoke() {
        let cfg = euclid_cfg(0.05);
        let g = Grading {
            h_min: 5e-3,
            ..Grading::default()
        };
        let mesh = build_meridian_mesh(&cfg, 8.0, &g).unwrap();
        assert!(mesh.axisym);
        assert!(mesh.triangles.len() > 50);
        // all vertices in the half-plane r ≥ 0
        assert!(mesh.vertices.iter().all(|v| v[0] >= -1e-12));
        // axis edges present, and weights positive
        assert!(mesh.boundary_edges.iter().any(|(_, t)| *t == Tag::Axis));
        for t in 0..mesh.triangles.len() {
            assert!(mesh.weight(t) > 0.0);
        }
    }

    #[test]
    fn export_text_round_numbers() {
        let cfg = euclid_cfg(0.1);
        let g = Grading {
            h_min: 0.05,
            h_max: 1.0,
            ..Grading::default()
        };
        let mesh = build_mesh(&cfg, 8.0, &g).unwrap();
        let text = mesh.export_text();
        assert!(text.contains("vertices"));
        assert!(text.contains("triangles"));
        assert!(text.lines().count() > mesh.vertices.len());
    }
}
