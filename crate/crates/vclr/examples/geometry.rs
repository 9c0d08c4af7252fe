//! Boxes, masks, run-length codes, and NMS.
//!
//! ```sh
//! cargo run --release --example geometry
//! ```

use vclr::geom::{nms, BBox, BitMask, Rle};

fn main() -> anyhow::Result<()> {
    // Two overlapping boxes and one far away. IoU saturates at zero for
    // disjoint pairs; GIoU keeps ranking them by distance.
    let a = BBox::new(0.40, 0.40, 0.40, 0.40);
    let b = BBox::new(0.50, 0.40, 0.40, 0.40);
    let far = BBox::new(0.90, 0.90, 0.10, 0.10);
    println!("a vs b    IoU {:.4}   GIoU {:+.4}   L1 {:.4}", a.iou(&b), a.giou(&b), a.l1(&b));
    println!("a vs far  IoU {:.4}   GIoU {:+.4}", a.iou(&far), a.giou(&far));

    // A ring mask: run-length codes round-trip it exactly.
    let center = 15.5;
    let ring = BitMask::from_fn(32, 32, |y, x| {
        let d = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt();
        (6.0..=10.0).contains(&d)
    });
    let rle = Rle::encode(&ring);
    assert_eq!(rle.decode()?, ring);
    println!(
        "ring      {} pixels -> {} runs -> same {} pixels back",
        ring.count_ones(),
        rle.counts.len(),
        rle.decode()?.count_ones()
    );

    // Mask IoU against the filled disc the ring sits on.
    let disc = BitMask::from_fn(32, 32, |y, x| {
        let d = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt();
        d <= 10.0
    });
    println!("ring/disc mask IoU {:.4}", ring.iou(&disc));

    // NMS keeps the strongest of the overlapping cluster plus the loner.
    let boxes = [a, b, far];
    let scores = [0.7, 0.9, 0.5];
    let kept = nms(&boxes, &scores, 0.5);
    println!("nms kept indices {kept:?} (b beats a, far survives)");
    assert_eq!(kept, vec![1, 2]);
    Ok(())
}
