/** Word-level diff between two report texts, for highlighting corrections. */

export interface DiffSpan {
  kind: "same" | "added" | "removed";
  text: string;
}

function lcsTable(a: string[], b: string[]): number[][] {
  const table: number[][] = Array.from({ length: a.length + 1 }, () =>
    new Array<number>(b.length + 1).fill(0),
  );
  for (let i = a.length - 1; i >= 0; i--) {
    for (let j = b.length - 1; j >= 0; j--) {
      table[i]![j] =
        a[i] === b[j]
          ? table[i + 1]![j + 1]! + 1
          : Math.max(table[i + 1]![j]!, table[i]![j + 1]!);
    }
  }
  return table;
}

/** Diff of whitespace-separated words; adjacent same-kind words merge into one span. */
export function diffWords(oldText: string, newText: string): DiffSpan[] {
  const a = oldText.split(/\s+/).filter(Boolean);
  const b = newText.split(/\s+/).filter(Boolean);
  const table = lcsTable(a, b);
  const spans: DiffSpan[] = [];
  const push = (kind: DiffSpan["kind"], word: string) => {
    const last = spans[spans.length - 1];
    if (last && last.kind === kind) {
      last.text += ` ${word}`;
    } else {
      spans.push({ kind, text: word });
    }
  };
  let i = 0;
  let j = 0;
  while (i < a.length && j < b.length) {
    if (a[i] === b[j]) {
      push("same", a[i]!);
      i++;
      j++;
    } else if (table[i + 1]![j]! >= table[i]![j + 1]!) {
      push("removed", a[i]!);
      i++;
    } else {
      push("added", b[j]!);
      j++;
    }
  }
  for (; i < a.length; i++) push("removed", a[i]!);
  for (; j < b.length; j++) push("added", b[j]!);
  return spans;
}

export function changedSpanCount(spans: DiffSpan[]): number {
  return spans.filter((s) => s.kind !== "same").length;
}
