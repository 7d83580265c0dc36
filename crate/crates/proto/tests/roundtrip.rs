use crc::{Crc, CRC_16_IBM_3740};
use mgrid_proto::c37::{
    decode_command_frame, decode_data_frame, encode_command_frame, encode_data_frame, Command, CommandFrame,
    DataFrame, Phasor, PhasorSample, Timestamp,
};
use mgrid_proto::crc::crc_ccitt;
use mgrid_proto::modbus::{
    decode_request, decode_response, encode_request, encode_response, power_to_reg, reg_to_power, reg_to_soc,
    soc_to_reg, ExceptionCode, Request, RequestPdu, Response, ResponsePdu,
};
use proptest::prelude::*;

// CCITT-FALSE is catalogued as CRC-16/IBM-3740.
const ORACLE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

fn finite() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL
}

prop_compose! {
    fn data_frame()(
        idcode in 1u16..=6,
        soc in any::<u32>(),
        micros in 0u32..1_000_000,
        quality in any::<u8>(),
        stat in any::<u16>(),
        v in prop::array::uniform8(finite()),
    ) -> DataFrame {
        DataFrame {
            idcode,
            timestamp: Timestamp { soc, micros, quality },
            stat,
            sample: PhasorSample {
                voltage: Phasor { re: v[0], im: v[1] },
                current: Phasor { re: v[2], im: v[3] },
                freq_dev: v[4],
                dfreq: v[5],
                p_kw: v[6],
                q_kvar: v[7],
            },
        }
    }
}

fn request() -> impl Strategy<Value = Request> {
    let pdu = prop_oneof![
        (any::<u16>(), 1u16..=125).prop_map(|(addr, count)| RequestPdu::ReadHolding { addr, count }),
        (any::<u16>(), prop::collection::vec(any::<u16>(), 1..=123))
            .prop_map(|(addr, values)| RequestPdu::WriteMultiple { addr, values }),
        (any::<u8>()).prop_filter("not a handled code", |f| *f != 0x03 && *f != 0x10)
            .prop_map(|function| RequestPdu::Unsupported { function }),
    ];
    (any::<u16>(), any::<u8>(), pdu).prop_map(|(txn, unit, pdu)| Request { txn, unit, pdu })
}

fn response() -> impl Strategy<Value = Response> {
    let code = prop::sample::select(vec![
        ExceptionCode::IllegalFunction,
        ExceptionCode::IllegalDataAddress,
        ExceptionCode::IllegalDataValue,
        ExceptionCode::ServerDeviceFailure,
    ]);
    let pdu = prop_oneof![
        prop::collection::vec(any::<u16>(), 0..=125).prop_map(|values| ResponsePdu::ReadHolding { values }),
        (any::<u16>(), any::<u16>()).prop_map(|(addr, count)| ResponsePdu::WriteMultiple { addr, count }),
        (0u8..0x80, code).prop_map(|(function, code)| ResponsePdu::Exception { function, code }),
    ];
    (any::<u16>(), any::<u8>(), pdu).prop_map(|(txn, unit, pdu)| Response { txn, unit, pdu })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn data_frames_round_trip(f in data_frame()) {
        let bytes = encode_data_frame(&f).unwrap();
        prop_assert_eq!(bytes.len(), 50);
        let crc = u16::from_be_bytes([bytes[48], bytes[49]]);
        prop_assert_eq!(crc, ORACLE.checksum(&bytes[..48]));
        let back = decode_data_frame(&bytes).unwrap();
        // Bitwise comparison so -0.0 and 0.0 are told apart.
        prop_assert_eq!(encode_data_frame(&back).unwrap(), bytes);
        prop_assert_eq!(back.idcode, f.idcode);
        prop_assert_eq!(back.timestamp, f.timestamp);
    }

    #[test]
    fn requests_round_trip(r in request()) {
        let bytes = encode_request(&r).unwrap();
        prop_assert_eq!(decode_request(&bytes).unwrap(), r);
    }

    #[test]
    fn responses_round_trip(r in response()) {
        let bytes = encode_response(&r).unwrap();
        prop_assert_eq!(decode_response(&bytes).unwrap(), r);
    }

    #[test]
    fn crc_agrees_with_reference(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(crc_ccitt(&bytes), ORACLE.checksum(&bytes));
    }

    #[test]
    fn power_scaling_within_half_quantum(kw in -3000.0..3000.0f64) {
        prop_assert!((reg_to_power(power_to_reg(kw)) - kw).abs() <= 0.05 + 1e-9);
    }

    #[test]
    fn soc_scaling_within_half_quantum(pct in 0.0..=100.0f64) {
        prop_assert!((reg_to_soc(soc_to_reg(pct)) - pct).abs() <= 0.005 + 1e-9);
    }

    #[test]
    fn command_frames_round_trip(idcode in 1u16..=6, soc in any::<u32>(), micros in 0u32..1_000_000, code in any::<u16>()) {
        let c = CommandFrame { idcode, timestamp: Timestamp { soc, micros, quality: 0 }, command: Command::from_code(code) };
        prop_assert_eq!(decode_command_frame(&encode_command_frame(&c).unwrap()).unwrap(), c);
    }
}

#[test]
fn check_value_against_oracle() {
    assert_eq!(crc_ccitt(b"123456789"), 0x29B1);
    assert_eq!(ORACLE.checksum(b"123456789"), 0x29B1);
}
