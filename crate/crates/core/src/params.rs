//! Parameter trees generic over their leaf type.
//!
//! The same structure holds a layout (`ParamSpec`), stored values
//! (`Tensor<S>`), tape-bound variables (`Var<S>`), gradients, or optimizer
//! moments. Traversal order is the declaration order of the fields and is
//! the canonical order for initialization and serialization.

use rand::Rng;

use crate::tensor::{ConvGeom, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<S> {
        match self.init {
            Init::Uniform(b) => Tensor::rand_uniform(&self.shape, -b, b, rng),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A structure whose leaves are named values of type `P`.
pub trait Tree<P>: Sized {
    type Mapped<Q>;

    fn try_map_at<Q, E, F>(&self, prefix: &str, f: &mut F) -> Result<Self::Mapped<Q>, E>
    where
        F: FnMut(&str, &P) -> Result<Q, E>;

    fn visit_mut_at<F>(&mut self, prefix: &str, f: &mut F)
    where
        F: FnMut(&str, &mut P);

    fn try_map<Q, E, F>(&self, mut f: F) -> Result<Self::Mapped<Q>, E>
    where
        F: FnMut(&str, &P) -> Result<Q, E>,
    {
        self.try_map_at("", &mut f)
    }

    fn map<Q, F>(&self, mut f: F) -> Self::Mapped<Q>
    where
        F: FnMut(&str, &P) -> Q,
    {
        match self.try_map_at::<Q, std::convert::Infallible, _>("", &mut |n: &str, p: &P| Ok(f(n, p))) {
            Ok(m) => m,
            Err(never) => match never {},
        }
    }

    fn visit<F>(&self, mut f: F)
    where
        F: FnMut(&str, &P),
    {
        let _ = self.map(|n, p| f(n, p));
    }

    fn visit_mut<F>(&mut self, mut f: F)
    where
        F: FnMut(&str, &mut P),
    {
        self.visit_mut_at("", &mut f);
    }

    fn to_vec(&self) -> Vec<P>
    where
        P: Clone,
    {
        let mut out = Vec::new();
        self.visit(|_, p| out.push(p.clone()));
        out
    }

    /// Same structure with leaves taken from `leaves` in canonical order.
    ///
    /// # Panics
    /// If `leaves` has a different length than the tree.
    fn rebuild<Q: Clone>(&self, leaves: &[Q]) -> Self::Mapped<Q> {
        let mut it = leaves.iter();
        let out = self.map(|name, _| it.next().unwrap_or_else(|| panic!("no leaf for {name}")).clone());
        assert!(it.next().is_none(), "more leaves than tree positions");
        out
    }

    /// Leaf names in canonical order.
    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n.to_string()));
        out
    }
}

impl<P, T: Tree<P>> Tree<P> for Vec<T> {
    type Mapped<Q> = Vec<T::Mapped<Q>>;

    fn try_map_at<Q, E, F>(&self, prefix: &str, f: &mut F) -> Result<Self::Mapped<Q>, E>
    where
        F: FnMut(&str, &P) -> Result<Q, E>,
    {
        self.iter()
            .enumerate()
            .map(|(i, t)| t.try_map_at(&join(prefix, &i.to_string()), f))
            .collect()
    }

    fn visit_mut_at<F>(&mut self, prefix: &str, f: &mut F)
    where
        F: FnMut(&str, &mut P),
    {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut_at(&join(prefix, &i.to_string()), f);
        }
    }
}

/// A single value as a one-leaf tree, named by its position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leaf<P>(pub P);

impl<P> Tree<P> for Leaf<P> {
    type Mapped<Q> = Leaf<Q>;

    fn try_map_at<Q, E, F>(&self, prefix: &str, f: &mut F) -> Result<Leaf<Q>, E>
    where
        F: FnMut(&str, &P) -> Result<Q, E>,
    {
        Ok(Leaf(f(prefix, &self.0)?))
    }

    fn visit_mut_at<F>(&mut self, prefix: &str, f: &mut F)
    where
        F: FnMut(&str, &mut P),
    {
        f(prefix, &mut self.0)
    }
}

/// Implements [`Tree`] for a struct generic over its leaf type. `leaf`
/// fields hold a `P`, `sub` fields hold nested trees, `keep` fields are
/// copied unchanged.
macro_rules! param_tree {
    ($ty:ident { leaf: [$($leaf:ident),*], sub: [$($sub:ident),*], keep: [$($keep:ident),*] }) => {
        impl<P> $crate::params::Tree<P> for $ty<P> {
            type Mapped<Q> = $ty<Q>;

            #[allow(unused_variables)]
            fn try_map_at<Q, E, F>(&self, prefix: &str, f: &mut F) -> ::core::result::Result<$ty<Q>, E>
            where
                F: FnMut(&str, &P) -> ::core::result::Result<Q, E>,
            {
                Ok($ty {
                    $($leaf: f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf)?,)*
                    $($sub: self.$sub.try_map_at(&$crate::params::join(prefix, stringify!($sub)), f)?,)*
                    $($keep: self.$keep.clone(),)*
                })
            }

            #[allow(unused_variables)]
            fn visit_mut_at<F>(&mut self, prefix: &str, f: &mut F)
            where
                F: FnMut(&str, &mut P),
            {
                $(f(&$crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $(self.$sub.visit_mut_at(&$crate::params::join(prefix, stringify!($sub)), f);)*
            }
        }
    };
}
pub(crate) use param_tree;

/// Convolution (or transposed convolution) weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
    pub geom: ConvGeom,
    pub transpose: bool,
}
param_tree!(Conv { leaf: [weight, bias], sub: [], keep: [geom, transpose] });

/// Group-norm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}
param_tree!(Norm { leaf: [gamma, beta], sub: [], keep: [] });

/// Convolution followed by group norm and leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<P> {
    pub conv: Conv<P>,
    pub norm: Norm<P>,
}
param_tree!(ConvBlock { leaf: [], sub: [conv, norm], keep: [] });

impl Conv<ParamSpec> {
    /// Square-kernel convolution `cin → cout` with uniform fan-in init.
    pub fn spec(cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Self {
        let fan_in = cin / geom.groups * k * k;
        Self {
            weight: ParamSpec {
                shape: vec![cout, cin / geom.groups, k, k],
                init: Init::Uniform((1.0 / fan_in as f64).sqrt()),
            },
            bias: ParamSpec { shape: vec![cout], init: Init::Zeros },
            geom,
            transpose: false,
        }
    }

    /// Transposed convolution `cin → cout`; the weight is `[cin, cout/g, k, k]`.
    pub fn spec_transpose(cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Self {
        let fan_in = cout / geom.groups * k * k;
        Self {
            weight: ParamSpec {
                shape: vec![cin, cout / geom.groups, k, k],
                init: Init::Uniform((1.0 / fan_in as f64).sqrt()),
            },
            bias: ParamSpec { shape: vec![cout], init: Init::Zeros },
            geom,
            transpose: true,
        }
    }
}

impl Norm<ParamSpec> {
    pub fn spec(c: usize) -> Self {
        Self {
            gamma: ParamSpec { shape: vec![c], init: Init::Ones },
            beta: ParamSpec { shape: vec![c], init: Init::Zeros },
        }
    }
}

impl ConvBlock<ParamSpec> {
    pub fn spec(cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Self {
        Self { conv: Conv::spec(cin, cout, k, geom), norm: Norm::spec(cout) }
    }

    pub fn spec_transpose(cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Self {
        Self { conv: Conv::spec_transpose(cin, cout, k, geom), norm: Norm::spec(cout) }
    }
}

/// Fills a layout in canonical order from one generator.
pub fn initialize<S, T, R>(layout: &T, rng: &mut R) -> T::Mapped<Tensor<S>>
where
    S: Scalar,
    T: Tree<ParamSpec>,
    R: Rng + ?Sized,
{
    layout.map(|_, spec| spec.sample(rng))
}

/// Total scalar count of a layout or a stored tree.
pub fn count<S: Scalar, T: Tree<Tensor<S>>>(tree: &T) -> usize {
    let mut n = 0;
    tree.visit(|_, t| n += t.numel());
    n
}

pub fn count_spec<T: Tree<ParamSpec>>(tree: &T) -> usize {
    let mut n = 0;
    tree.visit(|_, s| n += s.numel());
    n
}

/// Registers every stored tensor as a tape leaf.
pub fn bind<S: Scalar, T: Tree<Tensor<S>>>(tree: &T, tape: &mut Tape<S>) -> T::Mapped<Var<S>> {
    tree.map(|_, t| tape.leaf(t.clone()))
}
