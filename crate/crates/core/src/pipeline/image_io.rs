//! Plain binary PPM (P6) image reading and writing.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets.
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Read whitespace-separated header tokens, skipping `#` comments.
fn next_token(r: &mut impl Read) -> io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(bad("unexpected end of PPM header"));
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if c == '#' {
            // Comment to end of line.
            while r.read(&mut byte)? == 1 && byte[0] != b'\n' {}
            continue;
        }
        if c.is_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

pub fn read_ppm<P: AsRef<Path>>(path: P) -> io::Result<RgbImage> {
    let mut r = BufReader::new(File::open(path)?);
    if next_token(&mut r)? != "P6" {
        return Err(bad("not a P6 PPM"));
    }
    let width: usize = next_token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = next_token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = next_token(&mut r)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only 8-bit PPM supported"));
    }
    let mut data = vec![0u8; width * height * 3];
    r.read_exact(&mut data)?;
    let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RgbImage { width, height, pixels })
}

pub fn write_ppm<P: AsRef<Path>>(path: P, image: &RgbImage) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    for p in &image.pixels {
        w.write_all(p)?;
    }
    Ok(())
}
