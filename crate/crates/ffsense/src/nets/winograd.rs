//! Winograd F(2x2, 3x3) convolution for the f32 inference path.
//!
//! Stride-1 3x3 convolutions dominate the trunk's arithmetic; the
//! Winograd transform trades 9 multiplies per output for 16/4 = 4 at
//! the cost of cheap add-only tile transforms, cutting the GEMM volume
//! by 2.25x. Weights are transformed once at engine compile time; each
//! forward pass transforms input tiles, runs 16 channel-space GEMMs,
//! and inverse-transforms the accumulated tiles.
//!
//! Scratch matrices are laid out channel-major (`[c][16][tiles]`) so
//! both transforms stream through memory; the GEMMs address them with
//! a row stride of `16 * tiles`.

use super::ensure_len;

/// A compiled stride-1 3x3 convolution (padding 1) with folded bias and
/// optional fused rectifier.
pub struct WinogradConv {
    pub c_in: usize,
    pub c_out: usize,
    /// Transformed weights, 16 row-major `[c_out x c_in]` matrices.
    u: Vec<f32>,
    pub bias: Vec<f32>,
    pub relu: bool,
}

impl WinogradConv {
    /// `weights` is row-major `[c_out][c_in][3][3]`.
    pub fn new(weights: &[f32], bias: Vec<f32>, c_in: usize, c_out: usize, relu: bool) -> Self {
        assert_eq!(weights.len(), c_out * c_in * 9);
        assert_eq!(bias.len(), c_out);
        // U = G g G^T, computed in f64 and stored per transform point.
        let mut u = vec![0f32; 16 * c_out * c_in];
        for o in 0..c_out {
            for c in 0..c_in {
                let g = &weights[(o * c_in + c) * 9..(o * c_in + c) * 9 + 9];
                let g: Vec<f64> = g.iter().map(|v| *v as f64).collect();
                // rows: G (4x3) applied to g (3x3) -> t (4x3)
                let mut t = [[0f64; 3]; 4];
                for j in 0..3 {
                    let (g0, g1, g2) = (g[j], g[3 + j], g[6 + j]);
                    t[0][j] = g0;
                    t[1][j] = 0.5 * (g0 + g1 + g2);
                    t[2][j] = 0.5 * (g0 - g1 + g2);
                    t[3][j] = g2;
                }
                // cols: t (4x3) times G^T -> U (4x4)
                for (i, row) in t.iter().enumerate() {
                    let (t0, t1, t2) = (row[0], row[1], row[2]);
                    let vals = [t0, 0.5 * (t0 + t1 + t2), 0.5 * (t0 - t1 + t2), t2];
                    for (j, val) in vals.iter().enumerate() {
                        u[((i * 4 + j) * c_out + o) * c_in + c] = *val as f32;
                    }
                }
            }
        }
        WinogradConv {
            c_in,
            c_out,
            u,
            bias,
            relu,
        }
    }

    /// `input` is CHW `[c_in][h][w]`; writes CHW `[c_out][h][w]` into
    /// `out`. `v_buf` and `m_buf` are reusable scratch.
    pub fn forward(
        &self,
        input: &[f32],
        h: usize,
        w: usize,
        out: &mut Vec<f32>,
        v_buf: &mut Vec<f32>,
        m_buf: &mut Vec<f32>,
    ) {
        debug_assert_eq!(input.len(), self.c_in * h * w);
        let th = h.div_ceil(2);
        let tw = w.div_ceil(2);
        let tiles = th * tw;

        // V[c][i][t] = (B^T d B)_i for channel c, tile t
        ensure_len(v_buf, self.c_in * 16 * tiles);
        let v = &mut v_buf[..self.c_in * 16 * tiles];
        for c in 0..self.c_in {
            let plane = &input[c * h * w..(c + 1) * h * w];
            let v_c = &mut v[c * 16 * tiles..(c + 1) * 16 * tiles];
            for ty in 0..th {
                for tx in 0..tw {
                    let t = ty * tw + tx;
                    // 4x4 input patch starting at (2ty - 1, 2tx - 1), zero padded
                    let mut d = [[0f32; 4]; 4];
                    let base_y = 2 * ty as isize - 1;
                    let base_x = 2 * tx as isize - 1;
                    for (dy, row) in d.iter_mut().enumerate() {
                        let y = base_y + dy as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let row_off = y as usize * w;
                        for (dx, val) in row.iter_mut().enumerate() {
                            let x = base_x + dx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            *val = plane[row_off + x as usize];
                        }
                    }
                    // rows: B^T d
                    let mut s = [[0f32; 4]; 4];
                    for j in 0..4 {
                        s[0][j] = d[0][j] - d[2][j];
                        s[1][j] = d[1][j] + d[2][j];
                        s[2][j] = d[2][j] - d[1][j];
                        s[3][j] = d[1][j] - d[3][j];
                    }
                    // cols: (B^T d) B
                    for (i, row) in s.iter().enumerate() {
                        let vals = [
                            row[0] - row[2],
                            row[1] + row[2],
                            row[2] - row[1],
                            row[1] - row[3],
                        ];
                        for (j, val) in vals.iter().enumerate() {
                            v_c[(i * 4 + j) * tiles + t] = *val;
                        }
                    }
                }
            }
        }

        // M[o][i][t]: for each transform point i,
        //   M_i (c_out x tiles) = U_i (c_out x c_in) * V_i (c_in x tiles)
        ensure_len(m_buf, self.c_out * 16 * tiles);
        let m = &mut m_buf[..self.c_out * 16 * tiles];
        for i in 0..16 {
            let u_i = &self.u[i * self.c_out * self.c_in..];
            unsafe {
                matrixmultiply::sgemm(
                    self.c_out,
                    self.c_in,
                    tiles,
                    1.0,
                    u_i.as_ptr(),
                    self.c_in as isize,
                    1,
                    v.as_ptr().add(i * tiles),
                    (16 * tiles) as isize,
                    1,
                    0.0,
                    m.as_mut_ptr().add(i * tiles),
                    (16 * tiles) as isize,
                    1,
                );
            }
        }

        // Y = A^T M A, scattered back with edge clipping
        ensure_len(out, self.c_out * h * w);
        for o in 0..self.c_out {
            let b = self.bias[o];
            let m_o = &m[o * 16 * tiles..(o + 1) * 16 * tiles];
            let out_plane = &mut out[o * h * w..(o + 1) * h * w];
            for ty in 0..th {
                for tx in 0..tw {
                    let t = ty * tw + tx;
                    let mut mm = [[0f32; 4]; 4];
                    for (i, row) in mm.iter_mut().enumerate() {
                        for (j, val) in row.iter_mut().enumerate() {
                            *val = m_o[(i * 4 + j) * tiles + t];
                        }
                    }
                    // rows: A^T m -> 2x4
                    let mut s = [[0f32; 4]; 2];
                    for j in 0..4 {
                        s[0][j] = mm[0][j] + mm[1][j] + mm[2][j];
                        s[1][j] = mm[1][j] - mm[2][j] - mm[3][j];
                    }
                    // cols: (A^T m) A -> 2x2
                    let y = [
                        [s[0][0] + s[0][1] + s[0][2], s[0][1] - s[0][2] - s[0][3]],
                        [s[1][0] + s[1][1] + s[1][2], s[1][1] - s[1][2] - s[1][3]],
                    ];
                    for dy in 0..2 {
                        let oy = 2 * ty + dy;
                        if oy >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let ox = 2 * tx + dx;
                            if ox >= w {
                                continue;
                            }
                            let mut val = y[dy][dx] + b;
                            if self.relu && val < 0.0 {
                                val = 0.0;
                            }
                            out_plane[oy * w + ox] = val;
                        }
                    }
                }
            }
        }
    }
}
