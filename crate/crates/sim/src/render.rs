use crate::world::{Shape, WorldState};

pub const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.1];

pub const PALETTE: [[f32; 3]; 6] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.4, 0.95],
    [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.85],
    [0.2, 0.85, 0.9],
];

/// Half side of a square relative to its bounding radius.
const SQUARE_HALF: f64 = 0.8;

/// Pixel coverage of one object at a pixel center, in `[0, 1]`, from a
/// signed distance measured in pixels.
fn coverage(state: &WorldState, k: usize, px: f64, py: f64, ppu: (f64, f64)) -> f64 {
    let o = &state.objects[k];
    let dx = (px - o.position.x) * ppu.0;
    let dy = (py - o.position.y) * ppu.1;
    let r = o.radius * ppu.0;
    let inside = match o.shape {
        Shape::Disk => r - (dx * dx + dy * dy).sqrt(),
        Shape::Square => {
            let h = o.radius * SQUARE_HALF * ppu.0;
            -(dx.abs() - h).max(dy.abs() - h)
        }
    };
    (inside + 0.5).clamp(0.0, 1.0)
}

/// Renders anti-aliased objects over a dark background, later objects on top.
///
/// Returns the `height x width x 3` frame and `K x height x width` instance
/// masks; a pixel belongs to the topmost object covering at least half of it.
pub fn render(state: &WorldState, height: usize, width: usize) -> (Vec<f32>, Vec<u8>) {
    let b = state.bounds;
    let ppu = (width as f64 / b.width(), height as f64 / b.height());
    let k_total = state.objects.len();
    let mut frame = Vec::with_capacity(height * width * 3);
    let mut masks = vec![0u8; k_total * height * width];
    for y in 0..height {
        for x in 0..width {
            let wx = b.min.x + (x as f64 + 0.5) / ppu.0;
            let wy = b.min.y + (y as f64 + 0.5) / ppu.1;
            let mut color = BACKGROUND.map(f64::from);
            let mut owner = None;
            for k in 0..k_total {
                let c = coverage(state, k, wx, wy, ppu);
                if c > 0.0 {
                    let col = PALETTE[state.objects[k].color_id as usize % PALETTE.len()];
                    for ch in 0..3 {
                        color[ch] = color[ch] * (1.0 - c) + f64::from(col[ch]) * c;
                    }
                }
                if c >= 0.5 {
                    owner = Some(k);
                }
            }
            frame.extend(color.iter().map(|&v| v as f32));
            if let Some(k) = owner {
                masks[(k * height + y) * width + x] = 1;
            }
        }
    }
    (frame, masks)
}
