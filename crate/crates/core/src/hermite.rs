//! 20-point Gauss–Hermite rule for the standard normal weight
//! `exp(-y^2/2) / sqrt(2 pi)`. Positive nodes only; the rule is symmetric.
//! Weights sum to one.

#![allow(clippy::excessive_precision)]

pub(crate) const NODES: usize = 20;

pub(crate) const POSITIVE_NODES: [f64; NODES / 2] = [
    0.34696415708135592797332244716367,
    1.0429453488027510314613668114342,
    1.7452473208141267149306786170389,
    2.4586636111723677513173505743257,
    3.1890148165533894148537174411591,
    3.9439673506573162603317681360445,
    4.7345813340460553439017094674777,
    5.5787388058932011526804033280231,
    6.5105901570136544863628926391835,
    7.6190485416797582913812815605992,
];

pub(crate) const WEIGHTS: [f64; NODES / 2] = [
    0.26079306344955485915109654193963,
    0.16173933398399996172121297778831,
    0.061506372063976906551817794932778,
    0.013997837447101003349847743214331,
    0.0018301031310804927955564551562628,
    0.00012882627996192944939831186239664,
    0.000004402121090230852833113072175362,
    0.000000061274902599829475404774412263837,
    2.4820623623151786455816077120757e-10,
    1.2578006724379270154106101436e-13,
];
