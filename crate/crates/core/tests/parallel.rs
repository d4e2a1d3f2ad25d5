use irtrack_core::par::{for_each_chunk, map_indexed, Exec};
use irtrack_core::rng::{normal, seeded};
use irtrack_core::tensor::ops::{conv2d_with, matmul_with};

#[test]
fn matmul_modes_are_bit_identical() {
    let mut rng = seeded(1);
    for &(m, k, n) in &[(1, 1, 1), (7, 3, 5), (64, 48, 80), (200, 64, 64)] {
        let a = normal(&mut rng, &[m, k], 1.0);
        let b = normal(&mut rng, &[k, n], 1.0);
        let s = matmul_with(&a, &b, Exec::Sequential).unwrap();
        let p = matmul_with(&a, &b, Exec::Parallel).unwrap();
        assert_eq!(s.data(), p.data(), "{m}x{k}x{n}");
    }
}

#[test]
fn conv_modes_are_bit_identical() {
    let mut rng = seeded(2);
    for &(cin, cout, hw, k) in &[(1, 1, 3, 3), (3, 8, 17, 3), (16, 16, 32, 3), (4, 2, 9, 1)] {
        let x = normal(&mut rng, &[cin, hw, hw], 1.0);
        let w = normal(&mut rng, &[cout, cin, k, k], 1.0);
        let s = conv2d_with(&x, &w, k / 2, Exec::Sequential).unwrap();
        let p = conv2d_with(&x, &w, k / 2, Exec::Parallel).unwrap();
        assert_eq!(s.data(), p.data());
    }
}

#[test]
fn map_indexed_keeps_index_order() {
    for exec in [Exec::Sequential, Exec::Parallel] {
        let v = map_indexed(exec, 1000, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }
}

#[test]
fn for_each_chunk_covers_every_chunk() {
    for exec in [Exec::Sequential, Exec::Parallel] {
        let mut out = vec![0.0; 103];
        for_each_chunk(exec, &mut out, 10, |c, chunk| {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = (c * 10 + j) as f64;
            }
        });
        assert!(out.iter().enumerate().all(|(i, &v)| v == i as f64));
    }
}

#[test]
fn small_work_stays_sequential() {
    assert_eq!(Exec::Parallel.for_work(10), Exec::Sequential);
    assert_eq!(Exec::Parallel.for_work(1 << 20), Exec::Parallel);
}
