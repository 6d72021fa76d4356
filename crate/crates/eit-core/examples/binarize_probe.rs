//! Scratch probe: a-posteriori coarse-scale evaluation of a saved fine field.
//! Usage: binarize_probe <mesh.txt> <fine_field.csv> <n_max>

use eit_core::coarse::{binarize, detect_regions, init_controls, CoarseControls};
use eit_core::diagnostics::l2_error;
use eit_core::forward::ConductivityField;
use eit_core::geometry::load_mesh;
use eit_core::phantoms::{make_circles_phantom, reference_three_spot_phantom};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mesh = load_mesh(std::path::Path::new(&args[1])).unwrap();
    let n_max: usize = args[3].parse().unwrap();
    let text = std::fs::read_to_string(&args[2]).unwrap();
    let values: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), mesh.num_elements());
    let fine = ConductivityField { values };
    let truth =
        make_circles_phantom(&reference_three_spot_phantom(mesh.radius, [0.4, 0.4, 0.4]), &mesh)
            .unwrap();
    println!("raw fine L2 error: {:e}", l2_error(&fine, &truth, &mesh));
    let seed = CoarseControls {
        sigma_low: 0.2,
        sigma_high: vec![0.4; n_max],
        sigma_th: vec![0.5; n_max],
    };
    let map = detect_regions(&fine, &seed, &mesh, None);
    let zeta = init_controls(&fine, &map, n_max).unwrap();
    let bin = binarize(&fine, &zeta, &map);
    println!("regions detected: {}", map.num_regions());
    println!("init zeta: low {:.4}, high {:?}, th {:?}", zeta.sigma_low, zeta.sigma_high, zeta.sigma_th);
    println!("binarized coarse-scale L2 error: {:e}", l2_error(&bin, &truth, &mesh));
}
