use proptest::prelude::*;

use swarm_infer::engine::Tensor;
use swarm_infer::partition::split_rows;
use swarm_infer::runtime::message::{pack_role, unpack_role, Message, MessageKind};
use swarm_infer::runtime::window::{SlidingWindow, WindowSpec};
use swarm_infer::runtime::wire::{decode, encode, read_frame, write_frame};

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..6, 1..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        prop::collection::vec(any::<f32>(), n).prop_map(move |d| Tensor::from_dims(&dims, d).unwrap())
    })
}

proptest! {
    #[test]
    fn data_frames_roundtrip(t in tensor(), stream in any::<u16>(), tag in any::<u64>(), src in any::<u16>(), task in 0usize..1000, slot in 0usize..64) {
        let msg = Message::data(stream, tag, src, pack_role(task, slot), t.clone());
        let bytes = encode(&msg).unwrap();
        let (back, used) = decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert!(back.tensor().unwrap().bit_eq(&t));
        prop_assert_eq!((back.stream_id, back.tag, back.source), (stream, tag, src));
        prop_assert_eq!(unpack_role(back.dest_role), (task, slot));

        let mut stream_buf = Vec::new();
        write_frame(&mut stream_buf, &msg).unwrap();
        let again = read_frame(&mut stream_buf.as_slice()).unwrap();
        prop_assert!(again.tensor().unwrap().bit_eq(&t));
    }

    #[test]
    fn control_frames_roundtrip(body in prop::collection::vec(any::<u8>(), 0..256), src in any::<u16>()) {
        for kind in [MessageKind::AlmostFull, MessageKind::RoleUpdate, MessageKind::Heartbeat, MessageKind::Ack] {
            let msg = Message::control(kind, 3, src, body.clone());
            let (back, _) = decode(&encode(&msg).unwrap()).unwrap();
            prop_assert_eq!(back, msg);
        }
    }

    #[test]
    fn truncated_frames_are_rejected(t in tensor(), cut in 1usize..20) {
        let bytes = encode(&Message::data(0, 1, 1, 0, t)).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn split_rows_tile_the_output(n in 1usize..5000, k in 1usize..8) {
        prop_assume!(k <= n);
        let mut next = 0;
        for i in 0..k {
            let r = split_rows(n, k, i);
            prop_assert_eq!(r.start, next);
            prop_assert!(r.len() == n / k || r.len() == n / k + 1);
            next = r.end;
        }
        prop_assert_eq!(next, n);
    }

    /// Any arrival order within the reorder slack yields the in-order windows.
    #[test]
    fn window_output_ignores_arrival_order(len in 1usize..6, stride in 1usize..6, count in 1usize..40, seed in any::<u64>()) {
        prop_assume!(stride <= len);
        let spec = WindowSpec { length: len, stride, slack: 8, ..WindowSpec::single() };
        let mut order: Vec<u64> = (0..count as u64).collect();
        // Shuffle within blocks of four so displacement stays under the slack.
        let mut s = seed;
        for block in order.chunks_mut(4) {
            for i in (1..block.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                block.swap(i, (s >> 33) as usize % (i + 1));
            }
        }
        let mut in_order = SlidingWindow::new(spec);
        let mut shuffled = SlidingWindow::new(spec);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for t in 0..count as u64 {
            a.extend(in_order.push(t, t).unwrap());
        }
        for &t in &order {
            b.extend(shuffled.push(t, t).unwrap());
        }
        prop_assert_eq!(&a, &b);
        let expected = if count >= len { (count - len) / stride + 1 } else { 0 };
        prop_assert_eq!(a.len(), expected);
        for (i, w) in a.iter().enumerate() {
            let first = (i * stride) as u64;
            prop_assert_eq!(&w.items, &(first..first + len as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn concat_then_unstack(parts in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 4), 1..6)) {
        let ts: Vec<Tensor> = parts.iter().map(|p| Tensor::from_dims(&[1, 4], p.clone()).unwrap()).collect();
        let refs: Vec<&Tensor> = ts.iter().collect();
        let joined = Tensor::concat(&refs).unwrap();
        prop_assert_eq!(joined.dims(), &[parts.len(), 4][..]);
        for (row, t) in joined.unstack().unwrap().iter().zip(&ts) {
            prop_assert_eq!(row.data(), t.data());
        }
    }
}
