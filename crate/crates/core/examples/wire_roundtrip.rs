//! Frames a tensor message and a control message, shows the header bytes,
//! and sends both across a loopback TCP connection.

use std::net::{TcpListener, TcpStream};

use swarm_infer::engine::Tensor;
use swarm_infer::runtime::message::{pack_role, Message, MessageKind};
use swarm_infer::runtime::wire::{encode, read_frame, write_frame, HEADER_LEN};

fn main() -> anyhow::Result<()> {
    let t = Tensor::from_dims(&[2, 2], vec![1.0, -2.5, 0.125, 3.0])?;
    let data = Message::data(1, 42, 3, pack_role(4, 1), t);
    let bytes = encode(&data)?;
    println!("data frame: {} bytes", bytes.len());
    println!("  header  {:02x?}", &bytes[..HEADER_LEN]);
    println!("  payload {:02x?}", &bytes[HEADER_LEN..]);

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let mut tx = TcpStream::connect(listener.local_addr()?)?;
    let (mut rx, _) = listener.accept()?;
    let signal = Message::control(MessageKind::AlmostFull, 1, 4, Vec::new());
    write_frame(&mut tx, &data)?;
    write_frame(&mut tx, &signal)?;
    let got = read_frame(&mut rx)?;
    let got_signal = read_frame(&mut rx)?;
    println!("tensor survives the socket bit-for-bit: {}", got.tensor().unwrap().bit_eq(data.tensor().unwrap()));
    println!("control message: {:?} from device {}", got_signal.kind, got_signal.source);
    Ok(())
}
