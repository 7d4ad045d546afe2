use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::gear1::HypercallId;
use crate::hexnum;

/// One guest workload instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    /// Busy for `ns` of guest time.
    Compute(u64),
    /// Load or store at `addr`. Trapped non-blocking stores let the vcpu
    /// continue; blocking accesses wait for the device model.
    Mmio {
        addr: u64,
        write: bool,
        value: u64,
        size: u8,
        blocking: bool,
    },
    Hypercall {
        code: u32,
        args: [u64; 3],
    },
    /// One-shot user timer. Consecutive arms are anchored to the previous
    /// deadline, so a loop of `armtimer; wfi` keeps an absolute period.
    ArmTimer(u64),
    /// Wait for the armed user timer, or for any interrupt when none is armed.
    Wfi,
    MemTouch {
        ipa: u64,
        stride: u64,
        count: u32,
    },
    KickWatchdog,
    /// Jump back to `index` until taken `times` times; 0 loops forever.
    LoopTo {
        index: usize,
        times: u32,
    },
    /// Device-model worker: service one ring request per round.
    ServiceIo,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty instruction")]
    Empty,
    #[error("unknown instruction `{0}`")]
    Unknown(String),
    #[error("`{0}`: expected {1}")]
    Operands(String, &'static str),
    #[error("bad number `{0}`")]
    Number(String),
}

fn num(s: &str) -> Result<u64, ParseError> {
    hexnum::parse(s).map_err(|_| ParseError::Number(s.to_string()))
}

impl FromStr for Instr {
    type Err = ParseError;

    /// Text form, one instruction per string:
    /// `compute 1000`, `mmio 0x1000_0000 w 0x5 4 block`, `mmio 0x1000_0000 r 4 nb`,
    /// `hvc version`, `hvc 0x20 2 1 0`, `armtimer 1000000`, `wfi`,
    /// `memtouch 0x4200_0000 64 128`, `kick`, `loop 0 10`, `serviceio`.
    fn from_str(s: &str) -> Result<Self, ParseError> {
        let t: Vec<&str> = s.split_whitespace().collect();
        let (&op, rest) = t.split_first().ok_or(ParseError::Empty)?;
        let bad = |what| ParseError::Operands(s.to_string(), what);
        let instr = match op {
            "compute" => match rest {
                [ns] => Instr::Compute(num(ns)?),
                _ => return Err(bad("compute <ns>")),
            },
            "mmio" => {
                let blocking = |m: &str| match m {
                    "block" => Ok(true),
                    "nb" => Ok(false),
                    _ => Err(bad("block|nb")),
                };
                match rest {
                    [addr, "w", value, size, mode] => Instr::Mmio {
                        addr: num(addr)?,
                        write: true,
                        value: num(value)?,
                        size: num(size)? as u8,
                        blocking: blocking(mode)?,
                    },
                    [addr, "r", size, mode] => Instr::Mmio {
                        addr: num(addr)?,
                        write: false,
                        value: 0,
                        size: num(size)? as u8,
                        blocking: blocking(mode)?,
                    },
                    _ => return Err(bad("mmio <addr> w <value> <size> block|nb | mmio <addr> r <size> block|nb")),
                }
            }
            "hvc" => {
                let (&id, args) = rest.split_first().ok_or_else(|| bad("hvc <id> [a0 a1 a2]"))?;
                let code = match HypercallId::from_name(id) {
                    Some(h) => h.code(),
                    None => num(id)? as u32,
                };
                if args.len() > 3 {
                    return Err(bad("at most 3 hypercall arguments"));
                }
                let mut a = [0u64; 3];
                for (slot, v) in a.iter_mut().zip(args) {
                    *slot = num(v)?;
                }
                Instr::Hypercall { code, args: a }
            }
            "armtimer" => match rest {
                [d] => Instr::ArmTimer(num(d)?),
                _ => return Err(bad("armtimer <delta_ns>")),
            },
            "wfi" if rest.is_empty() => Instr::Wfi,
            "memtouch" => match rest {
                [ipa, stride, count] => {
                    Instr::MemTouch { ipa: num(ipa)?, stride: num(stride)?, count: num(count)? as u32 }
                }
                _ => return Err(bad("memtouch <ipa> <stride> <count>")),
            },
            "kick" if rest.is_empty() => Instr::KickWatchdog,
            "loop" => match rest {
                [i, n] => Instr::LoopTo { index: num(i)? as usize, times: num(n)? as u32 },
                _ => return Err(bad("loop <index> <times>")),
            },
            "serviceio" if rest.is_empty() => Instr::ServiceIo,
            _ => return Err(ParseError::Unknown(s.to_string())),
        };
        Ok(instr)
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = |b: bool| if b { "block" } else { "nb" };
        match *self {
            Instr::Compute(ns) => write!(f, "compute {ns}"),
            Instr::Mmio { addr, write: true, value, size, blocking } => {
                write!(f, "mmio {addr:#x} w {value:#x} {size} {}", mode(blocking))
            }
            Instr::Mmio { addr, write: false, size, blocking, .. } => {
                write!(f, "mmio {addr:#x} r {size} {}", mode(blocking))
            }
            Instr::Hypercall { code, args: [a, b, c] } => match HypercallId::from_code(code) {
                Some(h) => write!(f, "hvc {} {a} {b} {c}", h.name()),
                None => write!(f, "hvc {code:#x} {a} {b} {c}"),
            },
            Instr::ArmTimer(d) => write!(f, "armtimer {d}"),
            Instr::Wfi => f.write_str("wfi"),
            Instr::MemTouch { ipa, stride, count } => write!(f, "memtouch {ipa:#x} {stride} {count}"),
            Instr::KickWatchdog => f.write_str("kick"),
            Instr::LoopTo { index, times } => write!(f, "loop {index} {times}"),
            Instr::ServiceIo => f.write_str("serviceio"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_each_form() {
        assert_eq!("compute 1_000".parse(), Ok(Instr::Compute(1000)));
        assert_eq!(
            "mmio 0x1000_0000 w 0x5 4 block".parse(),
            Ok(Instr::Mmio { addr: 0x1000_0000, write: true, value: 5, size: 4, blocking: true })
        );
        assert_eq!("hvc version".parse(), Ok(Instr::Hypercall { code: HypercallId::Version.code(), args: [0; 3] }));
        assert_eq!("hvc 0xffff 1".parse(), Ok(Instr::Hypercall { code: 0xffff, args: [1, 0, 0] }));
        assert_eq!("loop 0 10".parse(), Ok(Instr::LoopTo { index: 0, times: 10 }));
        assert!(matches!("jump 3".parse::<Instr>(), Err(ParseError::Unknown(_))));
        assert!(matches!("compute".parse::<Instr>(), Err(ParseError::Operands(..))));
        assert!(matches!("compute ten".parse::<Instr>(), Err(ParseError::Number(_))));
    }

    fn any_instr() -> impl Strategy<Value = Instr> {
        prop_oneof![
            any::<u64>().prop_map(Instr::Compute),
            (
                any::<u64>(),
                any::<bool>(),
                any::<u64>(),
                prop_oneof![Just(1u8), Just(2), Just(4), Just(8)],
                any::<bool>()
            )
                .prop_map(|(addr, write, value, size, blocking)| Instr::Mmio {
                    addr,
                    write,
                    value: if write { value } else { 0 },
                    size,
                    blocking
                }),
            (any::<u32>(), any::<[u64; 3]>()).prop_map(|(code, args)| Instr::Hypercall { code, args }),
            any::<u64>().prop_map(Instr::ArmTimer),
            Just(Instr::Wfi),
            (any::<u64>(), any::<u64>(), any::<u32>()).prop_map(|(ipa, stride, count)| Instr::MemTouch {
                ipa,
                stride,
                count
            }),
            Just(Instr::KickWatchdog),
            (0usize..1000, any::<u32>()).prop_map(|(index, times)| Instr::LoopTo { index, times }),
            Just(Instr::ServiceIo),
        ]
    }

    proptest! {
        #[test]
        fn text_form_round_trips(i in any_instr()) {
            prop_assert_eq!(i.to_string().parse::<Instr>(), Ok(i));
        }
    }
}
