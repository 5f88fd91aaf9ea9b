use envme::backend::{BlockStore, Mode};
use envme::host::driver::{Driver, DriverConfig, InitOutcome};
use envme::host::{Host, HostMemory, MIB};
use envme::nvme::{Controller, ControllerConfig};
use proptest::prelude::*;

const BLOCKS: u64 = 2048;

fn ready() -> (Host, Controller, Driver) {
    let mut host = Host::new(HostMemory::with_default_layout(16 * MIB, None).unwrap());
    let mut ctrl = Controller::new(ControllerConfig::default(), BlockStore::in_memory(512, BLOCKS).unwrap());
    let mut drv = Driver::new(DriverConfig::default());
    assert_eq!(drv.init(&mut host, &mut ctrl), InitOutcome::Ready);
    (host, ctrl, drv)
}

#[derive(Debug, Clone)]
enum Op {
    Write { lba: u64, blocks: u64, fill: u8 },
    Read { lba: u64, blocks: u64 },
    Flush,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..BLOCKS, 1u64..40, any::<u8>()).prop_map(|(lba, blocks, fill)| Op::Write { lba, blocks, fill }),
        (0..BLOCKS, 1u64..40).prop_map(|(lba, blocks)| Op::Read { lba, blocks }),
        Just(Op::Flush),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn io_matches_flat_model(ops in prop::collection::vec(op(), 1..60)) {
        let (mut host, mut ctrl, mut drv) = ready();
        let mut model = vec![0u8; (BLOCKS * 512) as usize];
        for op in ops {
            match op {
                Op::Write { lba, blocks, fill } => {
                    let data: Vec<u8> = (0..blocks * 512).map(|i| fill.wrapping_add(i as u8)).collect();
                    let r = drv.write(&mut host, &mut ctrl, lba, &data);
                    if lba + blocks <= BLOCKS {
                        prop_assert!(r.is_ok());
                        model[(lba * 512) as usize..((lba + blocks) * 512) as usize].copy_from_slice(&data);
                    } else {
                        prop_assert!(r.is_err());
                    }
                }
                Op::Read { lba, blocks } => {
                    let r = drv.read(&mut host, &mut ctrl, lba, blocks);
                    if lba + blocks <= BLOCKS {
                        let got = r.unwrap();
                        prop_assert!(got == model[(lba * 512) as usize..((lba + blocks) * 512) as usize]);
                    } else {
                        prop_assert!(r.is_err());
                    }
                }
                Op::Flush => prop_assert!(drv.flush(&mut host, &mut ctrl).is_ok()),
            }
        }
        prop_assert!(ctrl.store.read_raw(0, BLOCKS).unwrap() == model);
        prop_assert_eq!(ctrl.store.capacity(), BLOCKS * 512);
    }

    #[test]
    fn brick_is_one_way(modes in prop::collection::vec(0u8..4, 1..10)) {
        let mut s = BlockStore::in_memory(512, 64).unwrap();
        let mut dead = false;
        for m in modes {
            let mode = match m {
                0 => Mode::Normal,
                1 => Mode::Corrupt { seed: 1 },
                2 => Mode::Brick,
                _ => Mode::Normal,
            };
            dead |= mode == Mode::Brick;
            s.set_mode(mode);
            prop_assert_eq!(s.is_dead(), dead);
            prop_assert_eq!(s.capacity(), 64 * 512);
        }
    }
}

#[test]
fn shutdown_then_io_fails() {
    let (mut host, mut ctrl, mut drv) = ready();
    drv.write(&mut host, &mut ctrl, 0, &[1u8; 512]).unwrap();
    drv.shutdown(&mut host, &mut ctrl).unwrap();
    assert!(drv.read(&mut host, &mut ctrl, 0, 1).is_err());
    assert_eq!(host.log.count("shutdown-complete"), 1);
}
