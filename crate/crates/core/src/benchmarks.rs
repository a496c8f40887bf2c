//! The two benchmark plants used throughout the examples and tests.

use nalgebra::{dmatrix, DMatrix};

use crate::plant::PlantModel;

/// Three-state academic example, `gamma = 5`, `Sigma = I_3`.
pub fn illustrative() -> PlantModel {
    let a = dmatrix![
        1.0, 0.0, -5.0;
        -1.0, 1.0, 0.0;
        0.0, 0.0, 1.0
    ];
    let b = dmatrix![
        1.0, -10.0, 0.0;
        0.0, 3.0, 1.0;
        -1.0, 0.0, 2.0
    ];
    let d = DMatrix::from_diagonal(&nalgebra::dvector![0.5, 0.2, 0.2]);
    let mut c = DMatrix::zeros(6, 3);
    c.view_mut((0, 0), (3, 3)).fill_with_identity();
    let mut e = DMatrix::zeros(6, 3);
    e.view_mut((3, 0), (3, 3)).fill_with_identity();
    PlantModel::new(a, b, c, d, e, 5.0, DMatrix::identity(3, 3)).expect("illustrative plant is valid")
}

/// Cart-pole linearized at the upright position and sampled at 0.01 s
/// (`m_c = 1`, `m_p = 0.1`, `l = 0.5`, `g = 9.8`); `gamma = 10`, `Sigma = 0.1 I_4`.
pub fn cartpole() -> PlantModel {
    let a = dmatrix![
        1.0, 0.01, 0.0, 0.0;
        0.0, 1.0, -0.01, 0.0;
        0.0, 0.0, 1.0, 0.01;
        0.0, 0.0, 0.16, 1.0
    ];
    let b = dmatrix![0.0; 0.01; 0.0; -0.015];
    let mut c = DMatrix::zeros(5, 4);
    c.view_mut((0, 0), (4, 4)).fill_with_identity();
    let mut e = DMatrix::zeros(5, 1);
    e[(4, 0)] = 1.0;
    let d = DMatrix::identity(4, 4) * 0.001;
    PlantModel::new(a, b, c, d, e, 10.0, DMatrix::identity(4, 4) * 0.1).expect("cart-pole plant is valid")
}
