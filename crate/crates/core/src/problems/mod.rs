//! Built-in problems and their reference values.

mod closed_form;
mod coupled;
mod deep_bsde;
mod hjb;
mod toy;

pub use closed_form::{
    brownian_moment, toy_bml_closed_form_scheme1, toy_bml_closed_form_scheme1_grad, toy_bml_closed_form_scheme2,
    toy_scheme2_minimizer, toy_scheme2_minimum,
};
pub use coupled::{coupled_reference_trial, CoupledFbsde};
pub use deep_bsde::{deep_bsde_scheme_simulate, NodeControl};
pub use hjb::{hopf_cole_y0, hopf_cole_y0_with, Hjb};
pub use toy::ToyBsde;
