//! Parameter containers shared by every block.

use crate::error::Result;
use crate::tensor::{
    conv2d, conv2d_backward_acc, conv_transpose2d, conv_transpose2d_backward_acc, ConvParams,
    ConvSpec, Tensor,
};
use crate::Scalar;

/// A set of named convolution layers.
///
/// Gradients use the same type as parameters: [`Module::zeros_like`] gives an
/// accumulator with identical structure, and the two can be walked in
/// lock-step through [`Module::named_convs`] / [`Module::named_convs_mut`].
pub trait Module<T: Scalar>: Clone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams<T>)>);

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ConvParams<T>)>);

    fn named_convs(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_convs_mut(&mut self) -> Vec<(String, &mut ConvParams<T>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_convs().iter().map(|(_, c)| c.num_params()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, c) in g.named_convs_mut() {
            c.set_zero();
        }
        g
    }

    /// All scalars in visiting order: each layer's weight, then its bias.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, c) in self.named_convs() {
            out.extend_from_slice(c.weight.data());
            if let Some(b) = &c.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Views of every weight and bias buffer, in [`Module::flatten`] order.
    fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for (_, c) in self.named_convs() {
            out.push(c.weight.data());
            if let Some(b) = &c.bias {
                out.push(b.as_slice());
            }
        }
        out
    }

    /// Mutable views of every weight and bias buffer, in [`Module::flatten`] order.
    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for (_, c) in self.named_convs_mut() {
            let ConvParams { weight, bias, .. } = c;
            out.push(weight.data_mut());
            if let Some(b) = bias {
                out.push(b.as_mut_slice());
            }
        }
        out
    }
}

/// A differentiable block: forward with a cache, and the matching backward.
pub trait Block<T: Scalar>: Module<T> {
    type Cache;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache)>;

    /// Input gradient; parameter gradients are added into `grads`.
    fn backward(
        &self,
        x: &Tensor<T>,
        cache: &Self::Cache,
        gy: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>>;
}

/// Produces a layer for a spec: random init, zeros, etc.
pub type Factory<'a, T> = dyn FnMut(ConvSpec) -> ConvParams<T> + 'a;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Module`] for a struct whose fields are all convolutions or modules.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::Scalar> $crate::params::Module<T> for $ty<T> {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::tensor::ConvParams<T>)>,
            ) {
                $( $crate::params::Module::collect(&self.$field, &$crate::params::join(prefix, stringify!($field)), out); )*
            }

            fn collect_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::tensor::ConvParams<T>)>,
            ) {
                $( $crate::params::Module::collect_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_module;

/// A single layer is a module whose only entry carries the prefix as its name.
impl<T: Scalar> Module<T> for ConvParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams<T>)>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ConvParams<T>)>) {
        out.push((prefix.to_string(), self));
    }
}

/// A single layer as a block, forward or transposed according to its spec.
impl<T: Scalar> Block<T> for ConvParams<T> {
    type Cache = ();

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ())> {
        let y = if self.spec.transposed {
            conv_transpose2d(x, self)?
        } else {
            conv2d(x, self)?
        };
        Ok((y, ()))
    }

    fn backward(&self, x: &Tensor<T>, _: &(), gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        if self.spec.transposed {
            conv_transpose2d_backward_acc(x, self, gy, grads)
        } else {
            conv2d_backward_acc(x, self, gy, grads)
        }
    }
}
