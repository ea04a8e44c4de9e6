use std::fmt::Write as _;

/// Pixels per token along each side of a rendered token grid.
pub const PGM_SCALE: usize = 8;

/// Binary PGM (P5) of a square token grid, one gray level per codebook id:
/// id `i` of `k` maps to `round(255 * i / (k - 1))`.
pub fn render_pgm(ids: &[u32], grid_size: usize, k_img: u32) -> Vec<u8> {
    let side = grid_size * PGM_SCALE;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    let denom = f64::from(k_img.saturating_sub(1).max(1));
    for y in 0..side {
        for x in 0..side {
            let id = ids[(y / PGM_SCALE) * grid_size + x / PGM_SCALE];
            out.push((255.0 * f64::from(id) / denom).round().min(255.0) as u8);
        }
    }
    out
}

/// Report ids on the first line and the detokenized words on the second.
pub fn report_text(report: &[u32]) -> String {
    let ids: Vec<String> = report.iter().map(u32::to_string).collect();
    let mut s = ids.join(" ");
    s.push('\n');
    let words: Vec<String> = report.iter().map(|c| format!("<color {c}>")).collect();
    let _ = writeln!(s, "{}", words.join(" "));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_levels() {
        let img = render_pgm(&[0, 1, 2, 0], 2, 3);
        let header = b"P5\n16 16\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 256);
        assert_eq!(px[0], 0);
        assert_eq!(px[8], 128);
        assert_eq!(px[8 * 16], 255);
        assert_eq!(px[255], 0);
    }

    #[test]
    fn report_lines() {
        assert_eq!(report_text(&[0, 2]), "0 2\n<color 0> <color 2>\n");
    }
}
