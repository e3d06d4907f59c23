use std::collections::BTreeSet;

use super::{
    validate_with_lines, Cond, DataEntry, DataKind, DataObject, Function, GotRef, ImportDecl, Instruction, IrError,
    LineTable, Linkage, Program, ProgramFlag, Reg, Signature, Stmt, TypeTag, Width, DEFAULT_FUNCTION_ALIGN,
};

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> IrError {
    IrError::Syntax { line, col, msg: msg.into() }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '@'
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_ident_char) && !s.starts_with(|c: char| c.is_ascii_digit())
}

fn parse_int(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn parse_imm(s: &str) -> Option<u64> {
    parse_int(s.trim().strip_prefix('$')?)
}

fn parse_reg(s: &str) -> Option<Reg> {
    Reg::from_name(s.trim().strip_prefix('%')?)
}

struct SigParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> SigParser<'a> {
    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> Result<(), String> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(format!("expected `{tok}` at offset {}", self.pos))
        }
    }

    fn ident(&mut self) -> Result<&'a str, String> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest.find(|c: char| !is_ident_char(c)).unwrap_or(rest.len());
        if len == 0 {
            return Err(format!("expected identifier at offset {}", self.pos));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn type_tag(&mut self) -> Result<TypeTag, String> {
        let word = self.ident()?;
        Ok(match word {
            "void" => TypeTag::Void,
            "int32" => TypeTag::Int32,
            "int64" => TypeTag::Int64,
            "ptr" => {
                self.expect("(")?;
                let inner = self.type_tag()?;
                self.expect(")")?;
                TypeTag::Ptr(Box::new(inner))
            }
            "fnptr" => {
                self.expect("(")?;
                let sig = self.signature()?;
                self.expect(")")?;
                TypeTag::FnPtr(Box::new(sig))
            }
            "struct" => {
                self.expect("(")?;
                let name = self.ident()?.to_string();
                self.expect(")")?;
                TypeTag::Struct(name)
            }
            other => return Err(format!("unknown type `{other}`")),
        })
    }

    fn signature(&mut self) -> Result<Signature, String> {
        self.expect("(")?;
        let mut params = Vec::new();
        let mut variadic = false;
        if !self.eat(")") {
            loop {
                if self.eat("...") {
                    variadic = true;
                    self.expect(")")?;
                    break;
                }
                params.push(self.type_tag()?);
                if self.eat(")") {
                    break;
                }
                self.expect(",")?;
            }
        }
        self.expect("->")?;
        let ret = self.type_tag()?;
        Ok(Signature { ret, params, variadic })
    }
}

/// Parses a signature such as `(int64, ptr(int32), ...) -> int32`.
pub fn parse_signature(text: &str) -> Result<Signature, String> {
    let mut p = SigParser { src: text, pos: 0 };
    let sig = p.signature()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(format!("trailing input after signature: `{}`", &text[p.pos..]));
    }
    Ok(sig)
}

fn split_operands(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',').map(str::trim).collect()
}

/// `obj` or `obj[%reg]`.
fn parse_indexed(s: &str) -> Option<(String, Option<Reg>)> {
    let s = s.trim();
    match s.split_once('[') {
        Some((name, rest)) => {
            let reg = parse_reg(rest.strip_suffix(']')?)?;
            is_ident(name).then(|| (name.to_string(), Some(reg)))
        }
        None => is_ident(s).then(|| (s.to_string(), None)),
    }
}

fn parse_got_index(s: &str) -> Option<u32> {
    let inner = s.trim().strip_prefix("GOT[")?.strip_suffix(']')?;
    parse_int(inner).and_then(|v| u32::try_from(v).ok())
}

/// Parses a single instruction in canonical or hand-written form.
pub fn parse_instruction(text: &str) -> Result<Instruction, String> {
    let mut text = text.trim();
    let mut sig = None;
    if let Some((head, tail)) = text.split_once(" : ") {
        sig = Some(parse_signature(tail.trim())?);
        text = head.trim();
    }
    let mut notrack = false;
    if let Some(rest) = text.strip_prefix("notrack ") {
        notrack = true;
        text = rest.trim_start();
    }
    let (mnemonic, rest) = match text.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (text, ""),
    };
    let ops = split_operands(rest);
    let bad = || format!("malformed operands for `{mnemonic}`: `{rest}`");
    let imm32 = |s: &str| -> Result<u32, String> { parse_imm(s).and_then(|v| u32::try_from(v).ok()).ok_or_else(bad) };
    let reg = |s: &str| parse_reg(s).ok_or_else(bad);
    let target = |s: &str| -> Result<String, String> {
        if is_ident(s) {
            Ok(s.to_string())
        } else {
            Err(bad())
        }
    };
    let n = ops.len();
    let only_sites = |i: Instruction| -> Result<Instruction, String> {
        if sig.is_some() && !i.is_indirect_site() {
            return Err(format!("signature annotation not allowed on `{mnemonic}`"));
        }
        if notrack
            && !matches!(
                i,
                Instruction::IndirectCall { .. }
                    | Instruction::IndirectJmpReg { .. }
                    | Instruction::IndirectJmpGot { .. }
                    | Instruction::SwitchJmp { .. }
            )
        {
            return Err(format!("`notrack` not allowed on `{mnemonic}`"));
        }
        Ok(i)
    };

    let ins = match (mnemonic, n) {
        ("endbr64", 0) => Instruction::Endbr64,
        ("hlt", 0) => Instruction::Hlt,
        ("ud2", 0) => Instruction::Ud2,
        ("int3", 0) => Instruction::Int3,
        ("ret", 0) => Instruction::Ret,
        ("nop", 0) => Instruction::Nop { width: 1 },
        ("nop", 1) => {
            let w = parse_int(ops[0]).and_then(|v| u8::try_from(v).ok()).ok_or_else(bad)?;
            Instruction::Nop { width: w }
        }
        ("mov", 2) if ops[0].starts_with('$') => Instruction::MovImm { imm: imm32(ops[0])?, dst: reg(ops[1])? },
        ("mov", 2) => Instruction::MovReg { src: reg(ops[0])?, dst: reg(ops[1])? },
        ("sub", 2) if ops[0].starts_with('$') => Instruction::SubImm { imm: imm32(ops[0])?, dst: reg(ops[1])? },
        ("sub", 2) => Instruction::SubReg { src: reg(ops[0])?, dst: reg(ops[1])? },
        ("cmp", 2) => Instruction::CmpImm { imm: imm32(ops[0])?, dst: reg(ops[1])? },
        ("xor", 2) => Instruction::XorImm { imm: imm32(ops[0])?, dst: reg(ops[1])? },
        ("shl", 2) | ("rol", 2) => {
            let amount = parse_imm(ops[0]).and_then(|v| u8::try_from(v).ok()).ok_or_else(bad)?;
            let dst = reg(ops[1])?;
            if mnemonic == "shl" {
                Instruction::Shl { dst, amount }
            } else {
                Instruction::Rol { dst, amount }
            }
        }
        ("or", 2) => {
            let dst = reg(ops[1])?;
            if dst.width != Width::W64 {
                return Err("`or` takes a 64-bit register".into());
            }
            Instruction::Or64Imm { imm: parse_imm(ops[0]).ok_or_else(bad)?, dst }
        }
        ("je" | "jne" | "jae", 1) => {
            let cond = match mnemonic {
                "je" => Cond::Eq,
                "jne" => Cond::Ne,
                _ => Cond::Ae,
            };
            Instruction::CondBranch { cond, target: target(ops[0])? }
        }
        ("jmp", 1) => {
            let op = ops[0];
            if let Some(ind) = op.strip_prefix('*') {
                if let Some(r) = parse_reg(ind) {
                    Instruction::IndirectJmpReg { target: r, notrack, sig: sig.clone() }
                } else if let Some(i) = parse_got_index(ind) {
                    Instruction::IndirectJmpGot { slot: GotRef::Slot(i), notrack }
                } else if let Some(sym) = ind.strip_suffix("@GOT") {
                    Instruction::IndirectJmpGot { slot: GotRef::Symbol(target(sym)?), notrack }
                } else {
                    return Err(bad());
                }
            } else {
                Instruction::Jmp { target: target(op)? }
            }
        }
        ("call", 1) => {
            if let Some(ind) = ops[0].strip_prefix('*') {
                Instruction::IndirectCall { target: reg(ind)?, notrack, sig: sig.clone() }
            } else {
                Instruction::DirectCall { target: target(ops[0])? }
            }
        }
        ("lea", 2) => Instruction::LoadFnAddr { symbol: target(ops[0])?, dst: reg(ops[1])? },
        ("load", 2) => {
            let (object, index) = parse_indexed(ops[0]).ok_or_else(bad)?;
            Instruction::LoadData { dst: reg(ops[1])?, object, index }
        }
        ("store", 2) => Instruction::StoreData { src: reg(ops[0])?, object: target(ops[1])? },
        ("push", 1) => {
            if let Some(i) = parse_got_index(ops[0]) {
                Instruction::PushGotSlot { index: i }
            } else {
                Instruction::PushImm { imm: imm32(ops[0])? }
            }
        }
        ("switch", 1) => {
            let (table, index) = parse_indexed(ops[0]).ok_or_else(bad)?;
            let index = index.ok_or_else(bad)?;
            Instruction::SwitchJmp { table, index, notrack }
        }
        ("halt", 1) => {
            let code = ops[0].trim().parse::<i32>().map_err(|_| bad())?;
            Instruction::Halt { code }
        }
        _ => return Err(format!("unknown instruction `{text}`")),
    };
    only_sites(ins)
}

/// The remainder of `line` after its first `n` whitespace-separated words.
fn after_word(line: &str, n: usize) -> &str {
    let mut rest = line.trim_start();
    for _ in 0..n {
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        rest = rest[end..].trim_start();
    }
    rest
}

fn col_of(raw: &str, needle: &str) -> usize {
    raw.find(needle).map_or(1, |i| i + 1)
}

/// Parses `.fasm` source text into a validated [`Program`].
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let mut program = Program::default();
    let mut lines = LineTable::default();
    let mut current: Option<usize> = None;
    let mut saw_content = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let code = raw.split('#').next().unwrap_or("");
        let trimmed = code.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix(';') {
            if !saw_content {
                if let Some(ver) = comment.trim().strip_prefix("fasm v") {
                    if ver.trim() != "1" {
                        return Err(syntax(line_no, 1, format!("unsupported format version `{}`", ver.trim())));
                    }
                }
            }
            continue;
        }
        saw_content = true;

        let mut words = trimmed.split_whitespace();
        let head = words.next().unwrap_or_default();
        match head {
            ".program" => {
                let name = words.next().ok_or_else(|| syntax(line_no, 1, "missing program name"))?;
                if !is_ident(name) {
                    return Err(syntax(line_no, col_of(raw, name), "invalid program name"));
                }
                program.name = name.to_string();
                current = None;
            }
            ".relro_full" => {
                program.flags.insert(ProgramFlag::RelroFull);
                current = None;
            }
            ".import" => {
                let name = words.next().ok_or_else(|| syntax(line_no, 1, "missing import name"))?;
                if !is_ident(name) {
                    return Err(syntax(line_no, col_of(raw, name), "invalid import name"));
                }
                let sig_text = after_word(trimmed, 2).trim();
                let signature = parse_signature(sig_text).map_err(|e| syntax(line_no, col_of(raw, sig_text), e))?;
                program.imports.push(ImportDecl { name: name.to_string(), signature });
                current = None;
            }
            ".data" => {
                let (decl, init) = match trimmed.split_once('=') {
                    Some((d, i)) => (d, Some(i)),
                    None => (trimmed, None),
                };
                let parts: Vec<&str> = decl.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(syntax(line_no, 1, "expected `.data NAME KIND rw|ro [= entries]`"));
                }
                let name = parts[1];
                if !is_ident(name) {
                    return Err(syntax(line_no, col_of(raw, name), "invalid data object name"));
                }
                let kind = match parts[2] {
                    "jump_table" => DataKind::JumpTable,
                    "vtable" => DataKind::Vtable,
                    "fnptr_slot" => DataKind::FnptrSlot,
                    "bytes" => DataKind::Bytes,
                    other => return Err(syntax(line_no, col_of(raw, other), format!("unknown data kind `{other}`"))),
                };
                let writable = match parts[3] {
                    "rw" => true,
                    "ro" => false,
                    other => return Err(syntax(line_no, col_of(raw, other), "expected `rw` or `ro`")),
                };
                let mut entries = Vec::new();
                if let Some(init) = init {
                    for e in init.split(',').map(str::trim).filter(|e| !e.is_empty()) {
                        let entry = if let Some(v) = parse_int(e) {
                            DataEntry::Value(v)
                        } else if let Some((f, l)) = e.split_once(':') {
                            if !is_ident(f) || !is_ident(l) {
                                return Err(syntax(line_no, col_of(raw, e), "invalid label reference"));
                            }
                            DataEntry::Label { function: f.to_string(), label: l.to_string() }
                        } else if is_ident(e) {
                            DataEntry::Symbol(e.to_string())
                        } else {
                            return Err(syntax(line_no, col_of(raw, e), format!("invalid data entry `{e}`")));
                        };
                        entries.push(entry);
                    }
                }
                lines.data.insert(program.data_objects.len(), line_no);
                program.data_objects.push(DataObject { name: name.to_string(), kind, entries, writable });
                current = None;
            }
            ".func" => {
                let name = words.next().ok_or_else(|| syntax(line_no, 1, "missing function name"))?;
                if !is_ident(name) {
                    return Err(syntax(line_no, col_of(raw, name), "invalid function name"));
                }
                let after_name = after_word(trimmed, 2);
                let sig_start = after_name.find('(').ok_or_else(|| syntax(line_no, 1, "missing function signature"))?;
                let mut linkage = Linkage::Local;
                let mut align = DEFAULT_FUNCTION_ALIGN;
                let mut seen_attrs = BTreeSet::new();
                for attr in after_name[..sig_start].split_whitespace() {
                    if !seen_attrs.insert(attr) {
                        return Err(syntax(line_no, col_of(raw, attr), "repeated attribute"));
                    }
                    match attr {
                        "global" => linkage = Linkage::Global,
                        "local" => linkage = Linkage::Local,
                        a if a.starts_with("align=") => {
                            align = parse_int(&a["align=".len()..])
                                .and_then(|v| u32::try_from(v).ok())
                                .ok_or_else(|| syntax(line_no, col_of(raw, a), "invalid alignment"))?;
                        }
                        other => {
                            return Err(syntax(line_no, col_of(raw, other), format!("unknown attribute `{other}`")))
                        }
                    }
                }
                let sig_text = after_name[sig_start..].trim();
                let signature = parse_signature(sig_text).map_err(|e| syntax(line_no, col_of(raw, sig_text), e))?;
                let mut f = Function::new(name, linkage, signature);
                f.align = align;
                lines.functions.insert(program.functions.len(), line_no);
                program.functions.push(f);
                current = Some(program.functions.len() - 1);
            }
            d if d.starts_with('.') && !trimmed.ends_with(':') => {
                return Err(syntax(line_no, col_of(raw, d), format!("unknown directive `{d}`")));
            }
            _ => {
                let Some(fi) = current else {
                    return Err(syntax(line_no, col_of(raw, trimmed), "statement outside of a function"));
                };
                let func = &mut program.functions[fi];
                let si = func.body.len();
                if let Some(label) = trimmed.strip_suffix(':') {
                    if !is_ident(label) {
                        return Err(syntax(line_no, col_of(raw, label), "invalid label"));
                    }
                    func.body.push(Stmt::Label(label.to_string()));
                } else {
                    let ins = parse_instruction(trimmed).map_err(|e| syntax(line_no, col_of(raw, trimmed), e))?;
                    func.body.push(Stmt::Instr(ins));
                }
                lines.stmts.insert((fi, si), line_no);
            }
        }
    }

    validate_with_lines(&mut program, &lines)?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::RegisterId;

    #[test]
    fn empty_input_is_empty_program() {
        let p = parse_program("").unwrap();
        assert!(p.functions.is_empty());
        assert!(p.data_objects.is_empty());
    }

    #[test]
    fn undefined_call_target() {
        let src = ";fasm v1\n.func main () -> int32\n    call missing_fn\n    ret\n";
        let err = parse_program(src).unwrap_err();
        assert_eq!(err, IrError::UndefinedSymbol { symbol: "missing_fn".into(), line: 3 });
    }

    #[test]
    fn duplicate_label() {
        let src = ".func f () -> void\nl:\n    ret\nl:\n    ret\n";
        assert!(matches!(parse_program(src), Err(IrError::DuplicateLabel { line: 4, .. })));
    }

    #[test]
    fn syntax_error_has_position() {
        let src = ".func f () -> void\n    frobnicate %rax\n";
        match parse_program(src) {
            Err(IrError::Syntax { line, col, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(col, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_future_versions() {
        assert!(matches!(parse_program(";fasm v2\n"), Err(IrError::Syntax { line: 1, .. })));
    }

    #[test]
    fn address_taken_is_derived() {
        let src = "\
.data fp fnptr_slot rw = a
.func a () -> void
    ret
.func b () -> void
    ret
.func c () -> void
    lea b, %rax
    ret
";
        let p = parse_program(src).unwrap();
        let taken: Vec<_> = p.functions.iter().map(|f| f.address_taken).collect();
        assert_eq!(taken, vec![true, true, false]);
    }

    #[test]
    fn instruction_forms() {
        let cases = [
            ("mov $0xc00010ff, %eax", Instruction::MovImm { dst: Reg::r32(RegisterId::Rax), imm: 0xc00010ff }),
            ("notrack jmp *sym@GOT", Instruction::IndirectJmpGot { slot: GotRef::Symbol("sym".into()), notrack: true }),
            ("jmp *GOT[2]", Instruction::IndirectJmpGot { slot: GotRef::Slot(2), notrack: false }),
            ("push GOT[1]", Instruction::PushGotSlot { index: 1 }),
            ("push $3", Instruction::PushImm { imm: 3 }),
            ("rol $0x3d, %rdx", Instruction::Rol { dst: Reg::r64(RegisterId::Rdx), amount: 0x3d }),
            ("sub %rcx, %rdx", Instruction::SubReg { dst: Reg::r64(RegisterId::Rdx), src: Reg::r64(RegisterId::Rcx) }),
            (
                "load vt[%rbx], %rax",
                Instruction::LoadData {
                    dst: Reg::r64(RegisterId::Rax),
                    object: "vt".into(),
                    index: Some(Reg::r64(RegisterId::Rbx)),
                },
            ),
            ("halt -1", Instruction::Halt { code: -1 }),
        ];
        for (text, expected) in cases {
            assert_eq!(parse_instruction(text).unwrap(), expected, "{text}");
        }
    }

    #[test]
    fn call_site_signature_annotation() {
        let i = parse_instruction("call *%rcx : (int64, ...) -> fnptr((int32) -> void)").unwrap();
        let sig = i.site_signature().unwrap();
        assert!(sig.variadic);
        assert_eq!(sig.arity(), 1);
        assert!(parse_instruction("ret : () -> void").is_err());
        assert!(parse_instruction("notrack ret").is_err());
    }

    #[test]
    fn signature_round_trip_text() {
        for s in ["() -> void", "(int64, ptr(ptr(int32))) -> int64", "(struct(S), ...) -> fnptr(() -> int32)"] {
            assert_eq!(parse_signature(s).unwrap().to_string(), s);
        }
    }
}
