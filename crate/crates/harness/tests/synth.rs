use irtrack_harness::synth::{crop, generate_sequence, BACKGROUND_PEAK};
use irtrack_harness::RunConfig;

fn cfg(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c
}

#[test]
fn clean_frames_peak_inside_the_box() {
    for seed in 0..5 {
        let seq = generate_sequence(&cfg(seed)).unwrap();
        for (i, (f, a)) in seq.frames.iter().zip(&seq.annotations).enumerate() {
            let gt = a.gt.unwrap();
            let (_, h, w) = f.dims3().unwrap();
            let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
            for y in 0..h {
                for x in 0..w {
                    if f.at3(0, y, x) > best {
                        best = f.at3(0, y, x);
                        at = (x, y);
                    }
                }
            }
            let (px, py) = (at.0 as f64 + 0.5, at.1 as f64 + 0.5);
            assert!(px >= gt.x && px <= gt.x + gt.w && py >= gt.y && py <= gt.y + gt.h, "seed {seed} frame {i}");
            assert!(best > BACKGROUND_PEAK);
        }
    }
}

#[test]
fn same_seed_same_sequence() {
    let mut c = cfg(3);
    c.sequence.clutter = 0.7;
    c.sequence.occlusion = 0.1;
    assert_eq!(generate_sequence(&c).unwrap(), generate_sequence(&c).unwrap());
    c.seed = 4;
    assert_ne!(generate_sequence(&c).unwrap(), generate_sequence(&cfg(3)).unwrap());
}

#[test]
fn boxes_stay_inside_the_frame() {
    for seed in 0..20 {
        let mut c = cfg(seed);
        c.sequence.speed = 4.0;
        let seq = generate_sequence(&c).unwrap();
        let size = c.image.search_size as f64;
        for b in seq.annotations.iter().filter_map(|a| a.gt) {
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= size && b.y + b.h <= size, "{b:?}");
            assert!(b.w >= c.sequence.size_min as f64 && b.w <= c.sequence.size_max as f64);
        }
    }
}

#[test]
fn occlusion_hides_frames_but_never_the_first() {
    let mut c = cfg(1);
    c.sequence.occlusion = 0.2;
    c.sequence.frames = 200;
    let seq = generate_sequence(&c).unwrap();
    assert!(seq.annotations[0].visible);
    let hidden = seq.annotations.iter().filter(|a| !a.visible).count();
    assert!(hidden > 0);
    assert!(seq.annotations.iter().all(|a| a.visible == a.gt.is_some()));
}

#[test]
fn bad_sizes_are_rejected() {
    let mut c = cfg(0);
    c.sequence.size_min = 20;
    c.sequence.size_max = 10;
    assert!(generate_sequence(&c).is_err());
}

#[test]
fn crop_pads_with_zeros() {
    let seq = generate_sequence(&cfg(0)).unwrap();
    let f = &seq.frames[0];
    let c = crop(f, 0.0, 0.0, 8).unwrap();
    assert_eq!(c.shape(), &[1, 8, 8]);
    assert_eq!(c.at3(0, 0, 0), 0.0);
    assert_eq!(c.at3(0, 4, 4), f.at3(0, 0, 0));
    assert_eq!(c.at3(0, 7, 7), f.at3(0, 3, 3));
}
