//! Crystal data model, lattice reparameterisation, atom vectors, periodic
//! neighbour search and canonical atom ordering.
//!
//! Lattices are stored row-wise: row `k` of `L` is the `k`-th cell vector and
//! Cartesian positions are `X = F·L` for fractional coordinates `F`.

use std::cmp::Ordering;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{add3, cross, norm, sub3, svd3, Mat3, Vec3};
use crate::scalar::Real;

/// Number of element channels in the one-hot block.
pub const NUM_SPECIES: usize = 100;
/// Width of an atom vector: position (3) ‖ one-hot species (100) ‖ lattice (6).
pub const ATOM_VECTOR_DIM: usize = 3 + NUM_SPECIES + 6;
pub const COORD_CHANNELS: Range<usize> = 0..3;
pub const SPECIES_CHANNELS: Range<usize> = 3..3 + NUM_SPECIES;
pub const LATTICE_CHANNELS: Range<usize> = 3 + NUM_SPECIES..ATOM_VECTOR_DIM;

/// Periodic images are searched over translations `n ∈ {-R..R}³`.
pub const IMAGE_RANGE: i32 = 2;

pub type AtomVector<F> = [F; ATOM_VECTOR_DIM];

/// A periodic unit cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Crystal<F = f64> {
    lattice: Mat3<F>,
    cart_coords: Vec<Vec3<F>>,
    atomic_numbers: Vec<u8>,
}

impl<F: Real> Crystal<F> {
    pub fn new(lattice: Mat3<F>, cart_coords: Vec<Vec3<F>>, atomic_numbers: Vec<u8>) -> Result<Self> {
        if cart_coords.is_empty() {
            return Err(Error::InvalidCrystal("crystal has no atoms".into()));
        }
        if cart_coords.len() != atomic_numbers.len() {
            return Err(Error::InvalidCrystal(format!("{} coordinates but {} atomic numbers", cart_coords.len(), atomic_numbers.len())));
        }
        if let Some(&z) = atomic_numbers.iter().find(|&&z| z == 0 || z as usize > NUM_SPECIES) {
            return Err(Error::InvalidSpecies(z as i64));
        }
        if !lattice.is_finite() || lattice.det().abs() <= F::lit(1e-10) {
            return Err(Error::DegenerateLattice(format!("|det L| = {}", lattice.det().abs())));
        }
        if cart_coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCrystal("non-finite coordinate".into()));
        }
        Ok(Crystal { lattice, cart_coords, atomic_numbers })
    }

    pub fn from_fractional(lattice: Mat3<F>, frac: &[Vec3<F>], atomic_numbers: Vec<u8>) -> Result<Self> {
        let coords = frac.iter().map(|f| lattice.left_mul(f)).collect();
        Self::new(lattice, coords, atomic_numbers)
    }

    pub fn num_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn lattice(&self) -> &Mat3<F> {
        &self.lattice
    }

    pub fn cart_coords(&self) -> &[Vec3<F>] {
        &self.cart_coords
    }

    pub fn atomic_numbers(&self) -> &[u8] {
        &self.atomic_numbers
    }

    pub fn volume(&self) -> F {
        self.lattice.det().abs()
    }

    pub fn frac_coords(&self) -> Vec<Vec3<F>> {
        let inv = self.lattice.inverse().expect("validated non-singular lattice");
        self.cart_coords.iter().map(|x| inv.left_mul(x)).collect()
    }

    /// Cell vector lengths `(a, b, c)`.
    pub fn lengths(&self) -> Vec3<F> {
        [norm(&self.lattice.row(0)), norm(&self.lattice.row(1)), norm(&self.lattice.row(2))]
    }

    /// Smallest distance between opposite faces of the cell.
    pub fn min_interplanar_spacing(&self) -> F {
        let rows = [self.lattice.row(0), self.lattice.row(1), self.lattice.row(2)];
        let v = self.volume();
        [(1, 2), (0, 2), (0, 1)].iter().map(|&(p, q)| v / norm(&cross(&rows[p], &rows[q]))).fold(F::infinity(), F::min)
    }

    /// Same crystal with every fractional coordinate wrapped into `[0, 1)`.
    pub fn wrapped(&self) -> Self {
        let frac: Vec<Vec3<F>> = self.frac_coords().iter().map(|f| f.map(wrap_unit)).collect();
        let coords = frac.iter().map(|f| self.lattice.left_mul(f)).collect();
        Crystal { lattice: self.lattice, cart_coords: coords, atomic_numbers: self.atomic_numbers.clone() }
    }

    /// Lattice descriptor `L̂` of this cell.
    pub fn lattice_descriptor(&self) -> Result<[F; 6]> {
        Ok(reparameterize_lattice(&self.lattice.transpose())?.descriptor)
    }

    /// Rigidly rotates (and, for a left-handed basis, inverts) the crystal so
    /// that its lattice matrix equals the symmetric factor `L̃`.
    ///
    /// The resulting crystal is congruent to `self`, and `lattice_descriptor`
    /// is unchanged.
    pub fn canonical_frame(&self) -> Result<Self> {
        let rep = reparameterize_lattice(&self.lattice.transpose())?;
        let s = if rep.inverted { -F::one() } else { F::one() };
        let rot = rep.rotation.scale(s);
        let coords = self.cart_coords.iter().map(|x| rot.left_mul(x)).collect();
        Ok(Crystal { lattice: rep.symmetric, cart_coords: coords, atomic_numbers: self.atomic_numbers.clone() })
    }

    /// Atoms reordered so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Crystal {
            lattice: self.lattice,
            cart_coords: perm.iter().map(|&i| self.cart_coords[i]).collect(),
            atomic_numbers: perm.iter().map(|&i| self.atomic_numbers[i]).collect(),
        }
    }

    /// Wrapped, canonically ordered copy in the symmetric-lattice frame.
    pub fn standardized(&self) -> Result<Self> {
        let c = self.canonical_frame()?.wrapped();
        let order = canonical_atom_order(&c);
        Ok(c.permuted(&order.perm))
    }

    pub fn with_cart_coords(&self, coords: Vec<Vec3<F>>) -> Result<Self> {
        Self::new(self.lattice, coords, self.atomic_numbers.clone())
    }

    pub fn cast<G: Real>(&self) -> Crystal<G> {
        Crystal {
            lattice: self.lattice.cast(),
            cart_coords: self.cart_coords.iter().map(|x| x.map(|v| G::lit(v.as_f64()))).collect(),
            atomic_numbers: self.atomic_numbers.clone(),
        }
    }
}

#[inline]
pub(crate) fn wrap_unit<F: Real>(x: F) -> F {
    let w = x - x.floor();
    // floor of values just below an integer can round the difference to 1
    if w >= F::one() {
        F::zero()
    } else {
        w
    }
}

/// SVD-based reparameterisation `M = U·L̃` with `U` a rotation and `L̃`
/// symmetric positive definite.
///
/// When `det M < 0` no such factorisation exists; the singular vectors are
/// then sign-flipped so that `U` stays a proper rotation and `inverted` is
/// set, meaning `M = -U·L̃` (a point inversion, which leaves a lattice
/// unchanged).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReparamLattice<F = f64> {
    pub rotation: Mat3<F>,
    pub symmetric: Mat3<F>,
    /// Row-major upper triangle of `L̃`: `(l11, l12, l13, l22, l23, l33)`.
    pub descriptor: [F; 6],
    pub singular_values: [F; 3],
    pub inverted: bool,
}

pub fn reparameterize_lattice<F: Real>(m: &Mat3<F>) -> Result<ReparamLattice<F>> {
    if !m.is_finite() {
        return Err(Error::DegenerateLattice("non-finite lattice matrix".into()));
    }
    let det = m.det();
    if det.abs() <= F::lit(1e-10) {
        return Err(Error::DegenerateLattice(format!("|det| = {} <= 1e-10", det.abs())));
    }
    let svd = svd3(m);
    let mut w = svd.w;
    let v = svd.v;
    let inverted = (w * v.transpose()).det() < F::zero();
    if inverted {
        w = w.scale(-F::one());
    }
    let rotation = w * v.transpose();
    let mut sym = v * Mat3::diag(svd.sigma) * v.transpose();
    for i in 0..3 {
        for j in (i + 1)..3 {
            let avg = (sym[(i, j)] + sym[(j, i)]) / F::lit(2.0);
            sym[(i, j)] = avg;
            sym[(j, i)] = avg;
        }
    }
    Ok(ReparamLattice { rotation, symmetric: sym, descriptor: symmetric_to_descriptor(&sym), singular_values: svd.sigma, inverted })
}

pub fn symmetric_to_descriptor<F: Real>(m: &Mat3<F>) -> [F; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

/// Symmetric matrix from the row-major upper-triangle descriptor.
pub fn descriptor_to_symmetric<F: Real>(d: &[F; 6]) -> Mat3<F> {
    Mat3::from_rows([[d[0], d[1], d[2]], [d[1], d[3], d[4]], [d[2], d[4], d[5]]])
}

pub fn atom_vector<F: Real>(position: &Vec3<F>, atomic_number: u8, descriptor: &[F; 6]) -> Result<AtomVector<F>> {
    if atomic_number == 0 || atomic_number as usize > NUM_SPECIES {
        return Err(Error::InvalidSpecies(atomic_number as i64));
    }
    let mut v = [F::zero(); ATOM_VECTOR_DIM];
    v[..3].copy_from_slice(position);
    v[SPECIES_CHANNELS.start + atomic_number as usize - 1] = F::one();
    v[LATTICE_CHANNELS].copy_from_slice(descriptor);
    Ok(v)
}

/// Row `i` is `[X_i ‖ one-hot(A_i) ‖ L̂]` using the crystal's stored
/// Cartesian coordinates.
pub fn build_atom_vectors<F: Real>(c: &Crystal<F>) -> Result<Vec<AtomVector<F>>> {
    let lhat = c.lattice_descriptor()?;
    c.cart_coords.iter().zip(&c.atomic_numbers).map(|(x, &z)| atom_vector(x, z, &lhat)).collect()
}

/// Lexicographic list of lattice translations searched for periodic images.
pub fn image_offsets() -> impl Iterator<Item = [i32; 3]> {
    let r = IMAGE_RANGE;
    (-r..=r).flat_map(move |a| (-r..=r).flat_map(move |b| (-r..=r).map(move |c| [a, b, c])))
}

#[inline]
pub fn image_shift<F: Real>(lattice: &Mat3<F>, n: &[i32; 3]) -> Vec3<F> {
    lattice.left_mul(&[F::lit(n[0] as f64), F::lit(n[1] as f64), F::lit(n[2] as f64)])
}

/// Shortest distance from atom `i` to any periodic image of atom `j`; the
/// zero translation is excluded when `i == j`.
pub fn minimum_image_distance<F: Real>(c: &Crystal<F>, i: usize, j: usize) -> F {
    let xi = c.cart_coords[i];
    let xj = c.cart_coords[j];
    image_offsets()
        .filter(|n| !(i == j && *n == [0, 0, 0]))
        .map(|n| norm(&sub3(&xi, &add3(&xj, &image_shift(&c.lattice, &n)))))
        .fold(F::infinity(), F::min)
}

/// Smallest periodic distance between any two atom occurrences.
pub fn min_pair_distance<F: Real>(c: &Crystal<F>) -> F {
    let n = c.num_atoms();
    let mut best = F::infinity();
    for i in 0..n {
        for j in i..n {
            best = best.min(minimum_image_distance(c, i, j));
        }
    }
    best
}

/// One retained neighbour occurrence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborSite<F = f64> {
    pub atom: usize,
    pub image: [i32; 3],
    pub distance: F,
}

/// Center atom plus its minimum-distance-rule neighbours, padded to `1 + K`
/// rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEnvironment<F = f64> {
    pub rows: Vec<AtomVector<F>>,
    /// `true` for padding rows.
    pub pad_mask: Vec<bool>,
    pub valid_count: usize,
    pub center_index: usize,
    pub neighbors: Vec<NeighborSite<F>>,
}

impl<F: Real> LocalEnvironment<F> {
    pub fn max_neighbors(&self) -> usize {
        self.rows.len() - 1
    }
}

/// Minimum-distance rule: every image occurrence `q` with
/// `d_iq <= xi * d_min`, truncated to the `k` closest, ties broken by the
/// canonical atom order and then by image translation.
pub fn find_local_environment<F: Real>(c: &Crystal<F>, i: usize, xi: F, k: usize) -> Result<LocalEnvironment<F>> {
    let order = canonical_atom_order(c);
    let rank = order.ranks();
    let lhat = c.lattice_descriptor()?;
    local_environment_with(c, i, xi, k, &rank, &lhat)
}

/// Local environments of every atom, in atom index order.
pub fn local_environments<F: Real>(c: &Crystal<F>, xi: F, k: usize) -> Result<Vec<LocalEnvironment<F>>> {
    let rank = canonical_atom_order(c).ranks();
    let lhat = c.lattice_descriptor()?;
    (0..c.num_atoms()).map(|i| local_environment_with(c, i, xi, k, &rank, &lhat)).collect()
}

fn local_environment_with<F: Real>(
    c: &Crystal<F>,
    i: usize,
    xi: F,
    k: usize,
    rank: &[usize],
    lhat: &[F; 6],
) -> Result<LocalEnvironment<F>> {
    if i >= c.num_atoms() {
        return Err(Error::InvalidCrystal(format!("atom index {i} out of range")));
    }
    if xi < F::one() || k == 0 {
        return Err(Error::Config(format!("need xi >= 1 and K >= 1, got xi={xi}, K={k}")));
    }
    let center = c.cart_coords[i];
    let mut candidates: Vec<(NeighborSite<F>, Vec3<F>)> = Vec::with_capacity(c.num_atoms() * 125);
    for (j, xj) in c.cart_coords.iter().enumerate() {
        for n in image_offsets() {
            if j == i && n == [0, 0, 0] {
                continue;
            }
            let pos = add3(xj, &image_shift(&c.lattice, &n));
            let d = norm(&sub3(&pos, &center));
            candidates.push((NeighborSite { atom: j, image: n, distance: d }, pos));
        }
    }
    let d_min = candidates.iter().map(|(s, _)| s.distance).fold(F::infinity(), F::min);
    if !d_min.is_finite() {
        return Err(Error::DegenerateLattice("no finite periodic image distance".into()));
    }
    let cutoff = xi * d_min;
    if cutoff > F::lit(IMAGE_RANGE as f64) * c.min_interplanar_spacing() {
        return Err(Error::DegenerateLattice(format!("neighbour cutoff {cutoff} exceeds the searched image range for this cell")));
    }
    candidates.retain(|(s, _)| s.distance <= cutoff);
    candidates.sort_by(|(a, _), (b, _)| {
        a.distance.partial_cmp(&b.distance).unwrap_or(Ordering::Equal).then(rank[a.atom].cmp(&rank[b.atom])).then(a.image.cmp(&b.image))
    });
    candidates.truncate(k);

    let mut rows = Vec::with_capacity(k + 1);
    rows.push(atom_vector(&center, c.atomic_numbers[i], lhat)?);
    for (site, pos) in &candidates {
        rows.push(atom_vector(pos, c.atomic_numbers[site.atom], lhat)?);
    }
    let valid_count = rows.len();
    rows.resize(k + 1, [F::zero(); ATOM_VECTOR_DIM]);
    let pad_mask = (0..=k).map(|r| r >= valid_count).collect();
    Ok(LocalEnvironment { rows, pad_mask, valid_count, center_index: i, neighbors: candidates.into_iter().map(|(s, _)| s).collect() })
}

/// Permutation placing atoms in (atomic number, x, y, z) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtomOrdering {
    pub perm: Vec<usize>,
}

impl AtomOrdering {
    /// `ranks()[atom]` is the position of `atom` in the ordering.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.perm.len()];
        for (pos, &atom) in self.perm.iter().enumerate() {
            r[atom] = pos;
        }
        r
    }
}

pub fn canonical_atom_order<F: Real>(c: &Crystal<F>) -> AtomOrdering {
    let mut perm: Vec<usize> = (0..c.num_atoms()).collect();
    perm.sort_by(|&a, &b| {
        let (xa, xb) = (&c.cart_coords[a], &c.cart_coords[b]);
        c.atomic_numbers[a]
            .cmp(&c.atomic_numbers[b])
            .then(xa[0].partial_cmp(&xb[0]).unwrap_or(Ordering::Equal))
            .then(xa[1].partial_cmp(&xb[1]).unwrap_or(Ordering::Equal))
            .then(xa[2].partial_cmp(&xb[2]).unwrap_or(Ordering::Equal))
    });
    AtomOrdering { perm }
}
