//! Named parameter sets shared by the models, the optimizers and the
//! checkpoint format.

use crate::tensor::Tensor;

/// A fixed, ordered collection of named parameter tensors.
pub trait ParamSet {
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

/// Declares a parameter struct, a matching struct of graph leaves, and the
/// [`ParamSet`] plumbing between them. Field order fixes the checkpoint and
/// optimizer order.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident, $vars:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $crate::tensor::Tensor),*
        }

        /// Graph leaves holding one forward pass's copy of each parameter.
        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: $crate::graph::Var),*
        }

        impl $crate::params::ParamSet for $name {
            fn named(&self) -> Vec<(&'static str, &$crate::tensor::Tensor)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            fn named_mut(&mut self) -> Vec<(&'static str, &mut $crate::tensor::Tensor)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }
        }

        impl $name {
            pub fn bind(&self, g: &mut $crate::graph::Graph) -> $vars {
                $vars {
                    $($field: g.leaf(self.$field.clone())),*
                }
            }
        }

        impl $vars {
            /// Leaves in [`ParamSet::named`] order.
            pub fn all(&self) -> Vec<$crate::graph::Var> {
                vec![$(self.$field),*]
            }

            /// Inverse of [`Self::all`]; panics if `vars` is too short.
            pub fn from_slice(vars: &[$crate::graph::Var]) -> Self {
                let mut it = vars.iter().copied();
                $vars {
                    $($field: it.next().expect("too few parameter leaves")),*
                }
            }
        }
    };
}

pub(crate) use param_struct;
