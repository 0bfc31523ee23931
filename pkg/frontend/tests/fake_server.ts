// In-memory stand-in for the gate server, speaking the exact HTTP contract.
// Logs every request so tests can assert the widget's network footprint.

export interface LoggedRequest {
	method: string
	path: string
}

interface SessionState {
	sent: number
	correct: number
	outstanding: number | null // index into solutions
	decided: boolean
	granted?: boolean
}

export class FakeGateServer {
	tNum = 3
	tMin = 2
	feedbackMode: "silent" | "per_answer" = "per_answer"
	perChallengeDeadline: number | null = null
	exhausted = false
	failNextOpen = false
	resourceText = "the gated resource body"
	solutions = ["amber", "stone", "quill"]
	clueTexts = [
		["first hint", "second hint"],
		["third hint", "fourth hint"],
		["fifth hint", "sixth hint"],
	]
	log: LoggedRequest[] = []
	private sessions = new Map<string, SessionState>()
	private nextSession = 1
	private token = "tok-valid"

	fetch = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
		const url = typeof input === "string" ? input : input.toString()
		const path = url.replace(/^https?:\/\/[^/]+/, "")
		const method = (init?.method ?? "GET").toUpperCase()
		this.log.push({ method, path })

		if (this.failNextOpen) {
			this.failNextOpen = false
			throw new TypeError("network down")
		}

		if (method === "POST" && path === "/gate/sessions") {
			if (this.exhausted) return json(503, { error: "challenge bank exhausted" })
			const sid = `fake-${this.nextSession++}`
			this.sessions.set(sid, { sent: 0, correct: 0, outstanding: null, decided: false })
			return json(201, {
				session_id: sid,
				t_num: this.tNum,
				level: "easy",
				feedback_mode: this.feedbackMode,
				per_challenge_deadline: this.perChallengeDeadline,
			})
		}

		const challengeMatch = path.match(/^\/gate\/sessions\/([^/]+)\/challenge$/)
		if (method === "GET" && challengeMatch) {
			const session = this.sessions.get(challengeMatch[1])
			if (!session) return json(404, { error: "unknown session" })
			if (session.decided) return json(410, { error: "session already decided" })
			if (session.outstanding !== null) return json(409, { error: "outstanding challenge" })
			session.outstanding = session.sent
			session.sent += 1
			const idx = session.outstanding
			return json(200, {
				challenge_id: `c-${idx}`,
				preamble: "Answer each clue; chain the first letters.",
				clues: this.clueTexts[idx % this.clueTexts.length].map((text, i) => ({
					domain: i === 0 ? "Physics" : "Humanities",
					text,
				})),
				number: session.sent,
				remaining_after_this: this.tNum - session.sent,
			})
		}

		const answerMatch = path.match(/^\/gate\/sessions\/([^/]+)\/answer$/)
		if (method === "POST" && answerMatch) {
			const session = this.sessions.get(answerMatch[1])
			if (!session) return json(404, { error: "unknown session" })
			if (session.decided) return json(410, { error: "session already decided" })
			if (session.outstanding === null) return json(409, { error: "no outstanding challenge" })
			const body = JSON.parse((init?.body as string) ?? "{}")
			const idx = session.outstanding
			session.outstanding = null
			const correct =
				String(body.response ?? "").trim().toLowerCase() ===
				this.solutions[idx % this.solutions.length]
			if (correct) session.correct += 1
			const out: Record<string, unknown> = {
				sent_count: session.sent,
				remaining: this.tNum - session.sent,
			}
			if (this.feedbackMode === "per_answer") out.correct = correct
			if (session.sent === this.tNum) {
				session.decided = true
				session.granted = session.correct >= this.tMin
				const decision: Record<string, unknown> = {
					granted: session.granted,
					correct_count: session.correct,
					sent_count: session.sent,
				}
				if (session.granted) decision.token = this.token
				out.decision = decision
			}
			return json(200, out)
		}

		if (method === "GET" && path.startsWith("/protected/")) {
			const auth = headerOf(init, "Authorization")
			if (!auth) return json(401, { error: "missing bearer token" })
			if (auth !== `Bearer ${this.token}`) return json(403, { error: "invalid token" })
			return new Response(this.resourceText, { status: 200 })
		}

		return json(404, { error: "no such route" })
	}
}

function json(status: number, body: unknown): Response {
	return new Response(JSON.stringify(body), {
		status,
		headers: { "Content-Type": "application/json" },
	})
}

function headerOf(init: RequestInit | undefined, name: string): string | null {
	const headers = init?.headers
	if (!headers) return null
	if (headers instanceof Headers) return headers.get(name)
	if (Array.isArray(headers)) {
		const hit = headers.find(([k]) => k.toLowerCase() === name.toLowerCase())
		return hit ? hit[1] : null
	}
	const record = headers as Record<string, string>
	for (const key of Object.keys(record)) {
		if (key.toLowerCase() === name.toLowerCase()) return record[key]
	}
	return null
}
