use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mk_core::geometry::enumerate_hyperoctahedral;
use mk_core::kernels::{
    assemble_moment_kernel, enumerate_signatures, ChannelSpec, KernelBasis, MomentKernel, RadialProfile,
};
use mk_core::tasks::{iou_ellipse, CellClass, Ellipse};
use mk_core::verify::fixed_subspace_basis;

fn signatures(c: &mut Criterion) {
    c.bench_function("enumerate_signatures rank 4", |b| {
        b.iter(|| enumerate_signatures(black_box(4)))
    });
}

fn assembly(c: &mut Criterion) {
    let sig = enumerate_signatures(4).pop().unwrap();
    let k = MomentKernel {
        dim: 3,
        signature: sig,
        profile: RadialProfile::new(vec![1.0, 0.5, -0.25]),
        support: 3,
    };
    c.bench_function("assemble rank-4 kernel 3x3x3", |b| {
        b.iter(|| assemble_moment_kernel(black_box(&k)).unwrap())
    });

    let spec = ChannelSpec::standard(4, 4, 4);
    let basis = KernelBasis::new(&spec, &spec, 3, 3, 3).unwrap();
    let params = vec![0.1; basis.num_params()];
    c.bench_function("assemble dense 3D block kernel 4/4/4", |b| {
        b.iter(|| basis.assemble(black_box(&params)).unwrap())
    });
}

fn subspace(c: &mut Criterion) {
    let g = enumerate_hyperoctahedral(3);
    c.bench_function("fixed subspace rank 2, 3D, support 3", |b| {
        b.iter(|| fixed_subspace_basis(2, 3, 3, black_box(&g)).unwrap())
    });
}

fn iou(c: &mut Criterion) {
    let a = Ellipse::from_axes([10.0, 10.0], 5.0, 3.0, 0.4, CellClass::Smooth);
    let e = Ellipse::from_axes([12.0, 11.0], 4.0, 4.5, 1.1, CellClass::Smooth);
    c.bench_function("iou_ellipse res 128", |b| {
        b.iter(|| iou_ellipse(black_box(&a), black_box(&e), 128))
    });
}

criterion_group!(benches, signatures, assembly, subspace, iou);
criterion_main!(benches);
