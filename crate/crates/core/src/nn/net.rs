use super::tape::{Node, ParamRef, Tape};
use super::{layer_bias, layer_weight, HIDDEN_B1, HIDDEN_B2, HIDDEN_W1, HIDDEN_W2, HIDDEN_WIDTH};
use crate::error::{Error, Result};

/// Three dense layers, sigmoid-sigmoid-identity. `input` is `width × batch`;
/// the output is `1 × batch`.
pub fn mlp_forward(tape: &mut Tape<'_>, params: ParamRef, input: Node) -> Result<Node> {
    let width = tape.params(params).arch.input_width();
    let got = tape.value(input).nrows();
    if got != width {
        return Err(Error::ShapeMismatch {
            context: "mlp input",
            expected: format!("{width} rows"),
            got: format!("{got} rows"),
        });
    }
    let z1 = tape.affine(params, layer_weight(0), layer_bias(0), input)?;
    let a1 = tape.sigmoid(z1);
    let z2 = tape.affine(params, layer_weight(1), layer_bias(1), a1)?;
    let a2 = tape.sigmoid(z2);
    tape.affine(params, layer_weight(2), layer_bias(2), a2)
}

/// One recurrent step: `y_h = (q, h_prev)`, `h = σ(W_h1 y_h + b_h1)`,
/// `a = σ(W_h2 h + b_h2)`, and the output is the MLP applied to
/// `(rest, a)`. `q` and `h_prev` are single-column; `a` is broadcast to the
/// batch width of `rest`. Returns `(output, h)`.
pub fn rnn_cell_forward(
    tape: &mut Tape<'_>,
    params: ParamRef,
    q: Node,
    h_prev: Node,
    rest: Node,
) -> Result<(Node, Node)> {
    if !tape.params(params).arch.is_recurrent() {
        return Err(Error::ShapeMismatch {
            context: "rnn cell",
            expected: "recurrent architecture".into(),
            got: format!("{:?}", tape.params(params).arch),
        });
    }
    let hshape = tape.value(h_prev).shape();
    if hshape != (HIDDEN_WIDTH, 1) || tape.value(q).shape() != (1, 1) {
        return Err(Error::ShapeMismatch {
            context: "rnn hidden state",
            expected: format!("({HIDDEN_WIDTH}, 1) hidden and scalar supply"),
            got: format!("{hshape:?} hidden, {:?} supply", tape.value(q).shape()),
        });
    }
    let y_h = tape.concat(&[q, h_prev])?;
    let zh = tape.affine(params, HIDDEN_W1, HIDDEN_B1, y_h)?;
    let h_next = tape.sigmoid(zh);
    let za = tape.affine(params, HIDDEN_W2, HIDDEN_B2, h_next)?;
    let a = tape.sigmoid(za);
    let batch = tape.value(rest).ncols();
    let a_b = if batch == 1 { a } else { tape.broadcast(a, batch)? };
    let input = tape.concat(&[rest, a_b])?;
    let out = mlp_forward(tape, params, input)?;
    Ok((out, h_next))
}
